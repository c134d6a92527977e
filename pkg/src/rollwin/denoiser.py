"""Small attention denoiser over frame tokens with per-token noise times.

One token per latent frame.  Queries always come from the tokens being
denoised; keys and values are the assembled [anchor | temporal | window]
context, so history and identity reach the window only through cached KV.
The network predicts the clean endpoint directly and reduces to the
identity map when every weight is zero (residual paths only), which the
oracle tests rely on.

Gradients are hand-written against a forward tape; context rows are
treated as constants (no gradient flows into cached KV), while window-row
keys and values do receive gradient through the attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conditioning import CondInjector
from .errors import ConfigError
from .kvcache import AssembledContext, LayerCache, StyleAnchor, TemporalCache, assemble
from .linalg import (
    RngState,
    RopeConfig,
    Tensor2D,
    fold_seed,
    normal_matrix,
    rope_rows,
    silu,
    silu_grad,
    softmax_rows,
)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    latent_dim: int = 16
    head_dim: int = 16
    ff_dim: int = 32
    time_feat_dim: int = 16
    cond_dim: int = 4
    rope_base: float = 10000.0
    injection_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if min(self.n_layers, self.latent_dim, self.head_dim, self.ff_dim) < 1:
            raise ConfigError("layer and width counts must be >= 1")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary keys, got {self.head_dim}")
        if self.time_feat_dim % 2 != 0 or self.time_feat_dim < 2:
            raise ConfigError(f"time_feat_dim must be a positive even count, got {self.time_feat_dim}")
        if self.cond_dim < 1:
            raise ConfigError(f"cond_dim must be >= 1, got {self.cond_dim}")
        if self.injection_layers is None:
            object.__setattr__(self, "injection_layers", tuple(range(self.n_layers)))

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(head_dim=self.head_dim, base=self.rope_base)

    def make_injector(self) -> CondInjector:
        return CondInjector(
            cond_dim=self.cond_dim,
            latent_dim=self.latent_dim,
            injection_layers=frozenset(self.injection_layers),
        )

    def to_text(self, param_seed: int) -> str:
        inj = ",".join(str(i) for i in self.injection_layers)
        lines = [
            f"n_layers={self.n_layers}",
            f"latent_dim={self.latent_dim}",
            f"head_dim={self.head_dim}",
            f"ff_dim={self.ff_dim}",
            f"time_feat_dim={self.time_feat_dim}",
            f"cond_dim={self.cond_dim}",
            f"rope_base={self.rope_base!r}",
            f"injection_layers={inj}",
            f"param_seed={param_seed}",
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> tuple["ModelConfig", int]:
        kv = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        cfg = ModelConfig(
            n_layers=int(kv["n_layers"]),
            latent_dim=int(kv["latent_dim"]),
            head_dim=int(kv["head_dim"]),
            ff_dim=int(kv["ff_dim"]),
            time_feat_dim=int(kv["time_feat_dim"]),
            cond_dim=int(kv["cond_dim"]),
            rope_base=float(kv["rope_base"]),
            injection_layers=tuple(int(x) for x in kv["injection_layers"].split(",") if x != ""),
        )
        return cfg, int(kv["param_seed"])


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: Tensor2D
    wk: Tensor2D
    wv: Tensor2D
    wo: Tensor2D
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: Tensor2D
    w2: Tensor2D


@dataclass
class DenoiserParams:
    cfg: ModelConfig
    param_seed: int
    time_proj: Tensor2D
    layers: list[LayerParams]
    ln_f_g: np.ndarray
    ln_f_b: np.ndarray
    w_out: Tensor2D

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("time_proj", self.time_proj)]
        for i, lp in enumerate(self.layers):
            for attr in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "w2"):
                out.append((f"layer{i}.{attr}", getattr(lp, attr)))
        out.extend([("ln_f_g", self.ln_f_g), ("ln_f_b", self.ln_f_b), ("w_out", self.w_out)])
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name in ("time_proj", "ln_f_g", "ln_f_b", "w_out"):
            setattr(self, name, value)
            return
        layer_tag, _, attr = name.partition(".")
        setattr(self.layers[int(layer_tag.removeprefix("layer"))], attr, value)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            cfg=self.cfg,
            param_seed=self.param_seed,
            time_proj=self.time_proj.copy(),
            layers=[
                LayerParams(**{k: getattr(lp, k).copy() for k in lp.__dataclass_fields__})
                for lp in self.layers
            ],
            ln_f_g=self.ln_f_g.copy(),
            ln_f_b=self.ln_f_b.copy(),
            w_out=self.w_out.copy(),
        )


def init_params(cfg: ModelConfig, seed: int) -> DenoiserParams:
    """Seeded initialization: scaled normal projections, zero output head.

    The output head starts at zero so the untrained network is the identity
    on its input frames (plus time and conditioning offsets), a stable
    starting point for denoising regression.
    """

    def draw(tag: int, rows: int, cols: int, scale: float) -> Tensor2D:
        mat, _ = normal_matrix(RngState(fold_seed(seed, tag)), rows, cols)
        return mat * scale

    d, hd, ff, tf = cfg.latent_dim, cfg.head_dim, cfg.ff_dim, cfg.time_feat_dim
    layers = []
    for i in range(cfg.n_layers):
        base = 100 * (i + 1)
        layers.append(
            LayerParams(
                ln1_g=np.ones(d),
                ln1_b=np.zeros(d),
                wq=draw(base + 1, d, hd, 1.0 / math.sqrt(d)),
                wk=draw(base + 2, d, hd, 1.0 / math.sqrt(d)),
                wv=draw(base + 3, d, hd, 1.0 / math.sqrt(d)),
                wo=draw(base + 4, hd, d, 1.0 / math.sqrt(hd)),
                ln2_g=np.ones(d),
                ln2_b=np.zeros(d),
                w1=draw(base + 5, d, ff, 1.0 / math.sqrt(d)),
                w2=draw(base + 6, ff, d, 1.0 / math.sqrt(ff)),
            )
        )
    return DenoiserParams(
        cfg=cfg,
        param_seed=seed,
        time_proj=draw(7, tf, d, 0.5 / math.sqrt(tf)),
        layers=layers,
        ln_f_g=np.ones(d),
        ln_f_b=np.zeros(d),
        w_out=np.zeros((d, d)),
    )


def zero_grads(params: DenoiserParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.named_tensors()}


# ---------------------------------------------------------------------------
# Timestep features
# ---------------------------------------------------------------------------


def timestep_features(t: float, feat_dim: int) -> np.ndarray:
    """Sinusoidal features of a noise time: [cos(w_k t) | sin(w_k t)], w_k = 2^k."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"noise time {t} outside [0, 1]")
    k = feat_dim // 2
    omega = 2.0 ** np.arange(k)
    return np.concatenate([np.cos(omega * t), np.sin(omega * t)])


def _time_feature_rows(times: np.ndarray, feat_dim: int) -> Tensor2D:
    return np.stack([timestep_features(float(t), feat_dim) for t in times])


# ---------------------------------------------------------------------------
# Forward core
# ---------------------------------------------------------------------------


def _ln_forward(x, gain, bias, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = (x - mu) * inv_std
    return normed * gain + bias, (normed, inv_std, gain)


def _ln_backward(dout, cache):
    normed, inv_std, gain = cache
    dg = (dout * normed).sum(axis=0)
    db = dout.sum(axis=0)
    dnormed = dout * gain
    dx = inv_std * (
        dnormed
        - dnormed.mean(axis=-1, keepdims=True)
        - normed * (dnormed * normed).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


@dataclass
class LayerTape:
    h_inj: Tensor2D
    ln1_cache: tuple
    a_in: Tensor2D
    q_rot: Tensor2D
    k_all: Tensor2D
    v_all: Tensor2D
    weights: Tensor2D
    attn: Tensor2D
    h_mid: Tensor2D
    ln2_cache: tuple
    f_in: Tensor2D
    z: Tensor2D
    a_act: Tensor2D
    n_ctx: int


@dataclass
class ForwardTape:
    timefeat: Tensor2D
    positions: np.ndarray
    layers: list[LayerTape]
    lnf_cache: tuple
    g_in: Tensor2D


@dataclass
class ForwardResult:
    x0_hat: Tensor2D
    u_i: int | None
    context_rows: int
    tape: ForwardTape | None
    layer_kv: list[tuple[Tensor2D, Tensor2D, Tensor2D]] | None  # (k_pre, k_rot, v)


_EMPTY_CACHE = TemporalCache(budget_tokens=0)


def forward_core(
    params: DenoiserParams,
    frames: Tensor2D,
    times: np.ndarray,
    positions: np.ndarray,
    conds: Tensor2D,
    injector: CondInjector,
    contexts: list[LayerCache] | None = None,
    reindex: bool = True,
    want_tape: bool = False,
    want_kv: bool = False,
) -> ForwardResult:
    """Shared token-level pass for window denoising, full-sequence mode, and encoding.

    frames/conds hold one row per token, times and positions one entry per
    token.  contexts supplies per-layer [anchor | temporal] KV rows to place
    before the window rows; None means self-attention only.
    """
    cfg = params.cfg
    n = frames.shape[0]
    if frames.shape[1] != cfg.latent_dim:
        raise ValueError(f"token width {frames.shape[1]} != latent_dim {cfg.latent_dim}")
    if times.shape[0] != n or positions.shape[0] != n:
        raise ValueError("times and positions must have one entry per token")
    if conds.shape != (n, cfg.cond_dim):
        raise ValueError(f"conds shape {conds.shape} != ({n}, {cfg.cond_dim})")
    if contexts is not None and len(contexts) != cfg.n_layers:
        raise ValueError(f"need one context per layer ({cfg.n_layers}), got {len(contexts)}")

    rope_cfg = cfg.rope
    scale = 1.0 / math.sqrt(cfg.head_dim)
    pos_f = positions.astype(np.float64)

    timefeat = _time_feature_rows(times, cfg.time_feat_dim)
    h = frames + timefeat @ params.time_proj

    layer_tapes: list[LayerTape] = []
    layer_kv: list[tuple[Tensor2D, Tensor2D, Tensor2D]] = []
    u_i: int | None = None
    context_rows = 0

    for li, lp in enumerate(params.layers):
        h_inj = injector.inject(h, conds, li)
        a_in, ln1_cache = _ln_forward(h_inj, lp.ln1_g, lp.ln1_b)
        q = a_in @ lp.wq
        k_pre = a_in @ lp.wk
        v = a_in @ lp.wv
        q_rot = rope_rows(q, pos_f, rope_cfg)
        k_rot = rope_rows(k_pre, pos_f, rope_cfg)

        layer_ctx = contexts[li] if contexts is not None else LayerCache(None, _EMPTY_CACHE)
        ctx = assemble(layer_ctx, k_rot, v, positions, rope_cfg, reindex=reindex)
        n_ctx = ctx.n_rows - ctx.n_window
        if u_i is None:
            u_i, context_rows = ctx.u_i, ctx.n_rows
        elif ctx.u_i != u_i or ctx.n_rows != context_rows:
            raise ValueError("per-layer caches disagree on context geometry")

        logits = (q_rot @ ctx.keys.T) * scale
        weights = softmax_rows(logits)
        attn = weights @ ctx.values
        h_mid = h_inj + attn @ lp.wo

        f_in, ln2_cache = _ln_forward(h_mid, lp.ln2_g, lp.ln2_b)
        z = f_in @ lp.w1
        a_act = silu(z)
        h = h_mid + a_act @ lp.w2

        if want_kv:
            layer_kv.append((k_pre, k_rot, v))
        if want_tape:
            layer_tapes.append(
                LayerTape(
                    h_inj=h_inj, ln1_cache=ln1_cache, a_in=a_in, q_rot=q_rot,
                    k_all=ctx.keys, v_all=ctx.values, weights=weights, attn=attn,
                    h_mid=h_mid, ln2_cache=ln2_cache, f_in=f_in, z=z, a_act=a_act,
                    n_ctx=n_ctx,
                )
            )

    g_in, lnf_cache = _ln_forward(h, params.ln_f_g, params.ln_f_b)
    x0_hat = h + g_in @ params.w_out

    tape = None
    if want_tape:
        tape = ForwardTape(
            timefeat=timefeat, positions=positions, layers=layer_tapes,
            lnf_cache=lnf_cache, g_in=g_in,
        )
    return ForwardResult(
        x0_hat=x0_hat,
        u_i=u_i,
        context_rows=context_rows,
        tape=tape,
        layer_kv=layer_kv if want_kv else None,
    )


def backward(
    params: DenoiserParams, tape: ForwardTape, d_x0: Tensor2D
) -> dict[str, np.ndarray]:
    """Parameter gradients for an upstream gradient on the clean prediction.

    Context KV rows are constants; window K/V rows propagate through the
    rotary map (transpose of a rotation is rotation at the negated position).
    """
    cfg = params.cfg
    rope_cfg = cfg.rope
    scale = 1.0 / math.sqrt(cfg.head_dim)
    neg_pos = -tape.positions.astype(np.float64)
    grads = zero_grads(params)

    grads["w_out"] += tape.g_in.T @ d_x0
    d_gin = d_x0 @ params.w_out.T
    dx, dg, db = _ln_backward(d_gin, tape.lnf_cache)
    grads["ln_f_g"] += dg
    grads["ln_f_b"] += db
    dh = d_x0 + dx

    for li in reversed(range(cfg.n_layers)):
        lp = params.layers[li]
        lt = tape.layers[li]

        d_a_act = dh @ lp.w2.T
        grads[f"layer{li}.w2"] += lt.a_act.T @ dh
        dz = d_a_act * silu_grad(lt.z)
        grads[f"layer{li}.w1"] += lt.f_in.T @ dz
        d_fin = dz @ lp.w1.T
        dx, dg, db = _ln_backward(d_fin, lt.ln2_cache)
        grads[f"layer{li}.ln2_g"] += dg
        grads[f"layer{li}.ln2_b"] += db
        dh_mid = dh + dx

        d_attn = dh_mid @ lp.wo.T
        grads[f"layer{li}.wo"] += lt.attn.T @ dh_mid
        d_weights = d_attn @ lt.v_all.T
        d_v_all = lt.weights.T @ d_attn
        d_logits = lt.weights * (
            d_weights - (d_weights * lt.weights).sum(axis=-1, keepdims=True)
        )
        d_q_rot = (d_logits @ lt.k_all) * scale
        d_k_all = (d_logits.T @ lt.q_rot) * scale

        d_k_rot = d_k_all[lt.n_ctx:]
        d_v_win = d_v_all[lt.n_ctx:]
        dq = rope_rows(d_q_rot, neg_pos, rope_cfg)
        dk = rope_rows(d_k_rot, neg_pos, rope_cfg)

        grads[f"layer{li}.wq"] += lt.a_in.T @ dq
        grads[f"layer{li}.wk"] += lt.a_in.T @ dk
        grads[f"layer{li}.wv"] += lt.a_in.T @ d_v_win
        d_a_in = dq @ lp.wq.T + dk @ lp.wk.T + d_v_win @ lp.wv.T
        dx, dg, db = _ln_backward(d_a_in, lt.ln1_cache)
        grads[f"layer{li}.ln1_g"] += dg
        grads[f"layer{li}.ln1_b"] += db
        dh = dh_mid + dx

    grads["time_proj"] += tape.timefeat.T @ dh
    return grads


# ---------------------------------------------------------------------------
# Mode wrappers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictedWindow:
    """Per-token clean predictions for a window, split per block on demand."""

    x0_tokens: Tensor2D
    block_frames: int

    def block(self, k: int) -> Tensor2D:
        lo = k * self.block_frames
        return self.x0_tokens[lo : lo + self.block_frames]

    def blocks(self) -> list[Tensor2D]:
        n = self.x0_tokens.shape[0] // self.block_frames
        return [self.block(k) for k in range(n)]


def forward_window(
    params: DenoiserParams,
    frames: Tensor2D,
    block_times: np.ndarray,
    block_frames: int,
    start_frame: int,
    conds: Tensor2D,
    injector: CondInjector,
    contexts: list[LayerCache] | None,
    reindex: bool = True,
    want_tape: bool = False,
    want_kv: bool = False,
) -> tuple[PredictedWindow, ForwardResult]:
    """Joint denoising update for a whole window of blocks at their own times."""
    n = frames.shape[0]
    if n % block_frames != 0:
        raise ValueError(f"{n} tokens do not split into blocks of {block_frames}")
    n_blocks = n // block_frames
    if block_times.shape[0] != n_blocks:
        raise ValueError(f"need one time per block ({n_blocks}), got {block_times.shape[0]}")
    times = np.repeat(np.asarray(block_times, dtype=np.float64), block_frames)
    positions = np.arange(start_frame, start_frame + n, dtype=np.int64)
    res = forward_core(
        params, frames, times, positions, conds, injector, contexts,
        reindex=reindex, want_tape=want_tape, want_kv=want_kv,
    )
    return PredictedWindow(res.x0_hat, block_frames), res


def encode_reference(
    params: DenoiserParams, reference: Tensor2D, injector: CondInjector
) -> list[tuple[Tensor2D, Tensor2D]]:
    """Per-layer (pre-rotation keys, values) of the reference frame at time 0.

    All reference tokens stand for one frame, so they share a single
    position; with equal positions the rotary map cancels inside the
    self-attention, and the stored keys are taken before rotation so the
    anchor can later be re-rotated to any virtual position.
    """
    n = reference.shape[0]
    res = forward_core(
        params,
        reference,
        times=np.zeros(n),
        positions=np.zeros(n, dtype=np.int64),
        conds=np.zeros((n, params.cfg.cond_dim)),
        injector=injector,
        contexts=None,
        want_kv=True,
    )
    return [(k_pre, v) for (k_pre, _, v) in res.layer_kv]


def build_anchors(
    params: DenoiserParams,
    reference: Tensor2D,
    injector: CondInjector,
    offset_d: int,
    start_position: int = 0,
    cond_features: Tensor2D | None = None,
) -> list[StyleAnchor]:
    """Freeze the reference frame into one StyleAnchor per layer.

    cond_features, when given, replaces the zero anchor conditioning (the
    zero-padding ablation); the default path ignores any original content.
    The frozen position records where the anchor would sit at stream start,
    used only when re-indexing is disabled.
    """
    n = reference.shape[0]
    if cond_features is None:
        conds = np.zeros((n, params.cfg.cond_dim))
    else:
        conds = np.broadcast_to(
            np.asarray(cond_features, dtype=np.float64).reshape(-1, params.cfg.cond_dim), (n, params.cfg.cond_dim)
        ).copy()
    res = forward_core(
        params,
        reference,
        times=np.zeros(n),
        positions=np.zeros(n, dtype=np.int64),
        conds=conds,
        injector=injector,
        contexts=None,
        want_kv=True,
    )
    return [
        StyleAnchor(
            pre_rope_keys=k_pre.copy(),
            values=v.copy(),
            offset_d=offset_d,
            frozen_position=start_position + offset_d,
        )
        for (k_pre, _, v) in res.layer_kv
    ]


def full_sequence_denoise(
    params: DenoiserParams,
    frames: Tensor2D,
    t: float,
    conds: Tensor2D,
    injector: CondInjector,
    anchors: list[StyleAnchor] | None = None,
    reference: Tensor2D | None = None,
    start_position: int = 0,
    want_tape: bool = False,
) -> ForwardResult:
    """Joint bidirectional clean prediction over a whole clip at one shared time.

    The style anchor (built from the reference frame unless supplied
    prebuilt) is prepended as context at the virtual position just before
    the clip; with neither anchors nor a reference the pass runs anchorless.
    This is the reference mode used for teacher training and for oracle
    equivalence against the windowed pass.
    """
    if anchors is None:
        if reference is None:
            anchors = [None] * params.cfg.n_layers
        else:
            anchors = build_anchors(
                params, reference, injector,
                offset_d=-1, start_position=start_position,
            )
    contexts = [LayerCache(anchor=a, temporal=_EMPTY_CACHE) for a in anchors]
    n = frames.shape[0]
    positions = np.arange(start_position, start_position + n, dtype=np.int64)
    return forward_core(
        params,
        frames,
        times=np.full(n, float(t)),
        positions=positions,
        conds=conds,
        injector=injector,
        contexts=contexts,
        want_tape=want_tape,
    )


def encode_clean_block(
    params: DenoiserParams,
    block_frames: Tensor2D,
    positions: np.ndarray,
    conds: Tensor2D,
    injector: CondInjector,
    contexts: list[LayerCache],
    reindex: bool = True,
) -> list[tuple[Tensor2D, Tensor2D]]:
    """Per-layer (rotated keys, values) of an emitted clean block.

    The block is re-encoded at time 0 against the current [anchor | temporal]
    context, the same view later queries will have of it, and the rotated
    keys at its true positions go into the temporal cache.
    """
    n = block_frames.shape[0]
    res = forward_core(
        params,
        block_frames,
        times=np.zeros(n),
        positions=positions,
        conds=conds,
        injector=injector,
        contexts=contexts,
        reindex=reindex,
        want_kv=True,
    )
    return [(k_rot, v) for (_, k_rot, v) in res.layer_kv]


# ---------------------------------------------------------------------------
# Checkpoint plumbing
# ---------------------------------------------------------------------------


def checkpoint_tensors(params: DenoiserParams) -> list[tuple[str, np.ndarray]]:
    return params.named_tensors()


def params_from_checkpoint(config_text: str, tensors: dict[str, np.ndarray]) -> DenoiserParams:
    cfg, seed = ModelConfig.from_text(config_text)
    params = init_params(cfg, seed)
    for name, template in params.named_tensors():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        loaded = tensors[name].reshape(template.shape)
        params.set_tensor(name, loaded.astype(np.float64))
    return params
