"""Dense float64 numeric kernel: attention, rotary embedding, norms, RNG.

Everything operates on plain 2-D float64 numpy arrays in row-major order
(``Tensor2D`` below is an alias, not a wrapper).  All functions are pure;
the random sampler takes and returns an explicit counter-based state so a
stream of draws is reproducible bit-for-bit no matter how calls are
batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

# A Tensor2D is a 2-D, C-contiguous float64 ndarray; rows/cols are .shape.
Tensor2D = np.ndarray

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def as_tensor(data, rows: int | None = None, cols: int | None = None) -> Tensor2D:
    """Coerce to a float64 2-D array, optionally checking the shape."""
    out = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if out.ndim == 1:
        out = out.reshape(1, -1)
    if out.ndim != 2:
        raise ValueError(f"expected a 2-D array, got ndim={out.ndim}")
    if rows is not None and out.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {out.shape[0]}")
    if cols is not None and out.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {out.shape[1]}")
    return out


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# Rotary position embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding parameters.

    head_dim must be even (rotation acts on adjacent pairs); base is the
    frequency base, pair j rotating at angle position * base**(-2j/head_dim).
    """

    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be a positive even count, got {self.head_dim}")
        if not self.base > 1.0:
            raise ValueError(f"base must be > 1, got {self.base}")

    def frequencies(self) -> np.ndarray:
        j = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * j / self.head_dim)


def rope_apply(key: np.ndarray, position: int, cfg: RopeConfig) -> np.ndarray:
    """Rotate a single head_dim vector to the given (possibly negative) position."""
    key = np.asarray(key, dtype=np.float64)
    if key.ndim != 1 or key.shape[0] != cfg.head_dim:
        raise ValueError(f"key must have length {cfg.head_dim}, got shape {key.shape}")
    return rope_rows(key.reshape(1, -1), np.array([position], dtype=np.float64), cfg)[0]


def rope_rows(mat: Tensor2D, positions: np.ndarray, cfg: RopeConfig) -> Tensor2D:
    """Rotate each row of ``mat`` at its own position.

    Rows pair up adjacent components (0,1), (2,3), ...; each pair is rotated
    by angle position * freq_j.  The map is orthogonal per row, so norms are
    preserved and the inverse is rotation at -position.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != cfg.head_dim:
        raise ValueError(f"expected (n, {cfg.head_dim}) matrix, got shape {mat.shape}")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    if positions.shape[0] != mat.shape[0]:
        raise ValueError("one position per row required")
    angles = positions[:, None] * cfg.frequencies()[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    x = mat[:, 0::2]
    y = mat[:, 1::2]
    out = np.empty_like(mat)
    out[:, 0::2] = x * cos - y * sin
    out[:, 1::2] = x * sin + y * cos
    return out


# ---------------------------------------------------------------------------
# Attention and elementwise blocks
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor2D) -> Tensor2D:
    """Row-wise softmax with max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention(queries: Tensor2D, keys: Tensor2D, values: Tensor2D) -> Tensor2D:
    """softmax(Q K^T / sqrt(d)) V over whatever keys were assembled.

    No mask: bidirectionality or causality is decided by which key rows the
    caller concatenated, not here.
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.shape[0] != values.shape[0]:
        raise ValueError(f"keys rows {keys.shape[0]} != values rows {values.shape[0]}")
    if queries.shape[1] != keys.shape[1]:
        raise ValueError(f"query dim {queries.shape[1]} != key dim {keys.shape[1]}")
    scale = 1.0 / math.sqrt(queries.shape[1])
    logits = (queries @ keys.T) * scale
    weights = softmax_rows(logits)
    return check_finite(weights @ values, "attention output")


def layer_norm(x: Tensor2D, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> Tensor2D:
    """Row-wise layer norm with learned per-feature gain and bias."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    normed = (x - mu) / np.sqrt(var + eps)
    return normed * gain + bias


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so the exponential never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, component by component."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for j in range(flat.shape[0]):
        probe = flat.copy()
        probe[j] += eps
        hi = f(probe.reshape(x.shape))
        probe[j] = flat[j] - eps
        lo = f(probe.reshape(x.shape))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite function value at probe index {j}")
        grad[j] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# Counter-based deterministic RNG
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngState:
    """Explicit (seed, counter) sampler state.

    Draw k of a stream consumes fixed counter slots, so splitting one request
    into several produces bit-identical values.  States are values: functions
    return the advanced state instead of mutating.
    """

    seed: int
    counter: int = 0

    def advanced(self, used: int) -> "RngState":
        return RngState(self.seed, self.counter + used)


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # uint64 wraparound is the point
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def _raw64(seed: int, idx: np.ndarray) -> np.ndarray:
    base = _U64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        return _mix64(base + (idx + _U64(1)) * _GOLDEN)


def fold_seed(seed: int, *parts) -> int:
    """Derive an independent stream seed from a base seed and int/str labels."""
    h = _U64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for p in parts:
            if isinstance(p, str):
                for byte in p.encode("utf-8"):
                    h = _mix64(h ^ (_U64(byte) + _GOLDEN))
            else:
                h = _mix64(h ^ (_U64(p & 0xFFFFFFFFFFFFFFFF) + _GOLDEN))
    return int(h)


def uniform(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """n doubles in [0, 1), one counter slot each."""
    idx = _U64(state.counter) + np.arange(n, dtype=np.uint64)
    vals = (_raw64(state.seed, idx) >> _U64(11)) * (2.0 ** -53)
    return vals, state.advanced(n)


def normal(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """n standard normals via Box-Muller, two counter slots each."""
    idx = _U64(state.counter) + np.arange(2 * n, dtype=np.uint64)
    raw = _raw64(state.seed, idx)
    u1 = ((raw[0::2] >> _U64(11)) + _U64(1)) * (2.0 ** -53)  # (0, 1]: log stays finite
    u2 = (raw[1::2] >> _U64(11)) * (2.0 ** -53)
    vals = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
    return vals, state.advanced(2 * n)


def normal_matrix(state: RngState, rows: int, cols: int) -> tuple[Tensor2D, RngState]:
    vals, state = normal(state, rows * cols)
    return vals.reshape(rows, cols), state


def pack(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Flatten a list of arrays into one vector (finite-difference plumbing)."""
    return np.concatenate([a.reshape(-1) for a in arrays]) if arrays else np.empty(0)


def unpack(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, at = [], 0
    for a in like:
        out.append(vec[at:at + a.size].reshape(a.shape))
        at += a.size
    if at != vec.size:
        raise ValueError(f"vector length {vec.size} does not match template size {at}")
    return out
