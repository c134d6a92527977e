"""Frame-synchronous conditioning: encoder, window alignment, injection.

The conditioning path turns a raw scalar control signal into per-frame
feature vectors through a frozen causal featurizer, aligns them to the
frames of the current window (which requires features for the window's
whole look-ahead span), and injects them additively into token rows at
selected transformer layers.  Anchor tokens always receive zero features
so the identity reference carries no stale control content.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LookaheadUnderrunError
from .linalg import RngState, Tensor2D, fold_seed, normal_matrix
from .schedule import StreamConfig, Window

# Fixed seeds for the frozen featurizer and injection projection; these are
# package constants, not experiment knobs, so every run shares one encoder.
_ENCODER_SEED = 0x5EED_C0DE
_INJECT_SEED = 0x1217_ACE5

ENCODER_RADIUS = 2


@dataclass(frozen=True)
class CondFrame:
    """Features for one absolute frame index."""

    frame_index: int
    features: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.features).all():
            raise ValueError(f"non-finite cond features at frame {self.frame_index}")


@dataclass(frozen=True)
class CondEncoder:
    """Frozen causal featurizer over a short raw-signal history.

    Frame t's features are a fixed random projection of the raw samples at
    frames [t - radius, t], zero-padded before the stream start.  The
    weights derive from a package-constant seed, so any two encodings of
    the same signal agree bit for bit.
    """

    cond_dim: int = 4
    radius: int = ENCODER_RADIUS
    weights: Tensor2D = field(init=False)

    def __post_init__(self):
        if self.cond_dim < 1:
            raise ValueError(f"cond_dim must be >= 1, got {self.cond_dim}")
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        taps = self.radius + 1
        w, _ = normal_matrix(RngState(fold_seed(_ENCODER_SEED, self.cond_dim, taps)), taps, self.cond_dim)
        w = w / np.sqrt(taps)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def encode_stream(self, raw: np.ndarray) -> Tensor2D:
        """Feature row per raw sample; row t sees raw[t-radius .. t] only."""
        raw = np.asarray(raw, dtype=np.float64).reshape(-1)
        n = raw.shape[0]
        taps = self.radius + 1
        padded = np.concatenate([np.zeros(self.radius), raw])
        stacked = np.stack([padded[k : k + n] for k in range(taps)], axis=1)
        return stacked @ self.weights

    def encode_frame(self, raw: np.ndarray, frame_index: int) -> CondFrame:
        feats = self.encode_stream(raw[: frame_index + 1])[frame_index]
        return CondFrame(frame_index=frame_index, features=feats)


def anchor_cond(cond_dim: int) -> CondFrame:
    """The all-zero features every anchor token receives."""
    return CondFrame(frame_index=-1, features=np.zeros(cond_dim))


def align_to_window(features: Tensor2D, window: Window, cfg: StreamConfig) -> Tensor2D:
    """Feature rows for exactly the window's frames, in frame order.

    features holds rows for absolute frames 0..len-1 of the stream; the
    window needs rows up to its last (look-ahead) frame, and a shortfall is
    an underrun the caller must resolve by buffering more input.
    """
    start = window.start_frame
    need = start + window.L * cfg.B
    if features.shape[0] < need:
        raise LookaheadUnderrunError(
            f"window covers frames {start}..{need - 1} but only "
            f"{features.shape[0]} cond frames are available"
        )
    return features[start:need]


@dataclass(frozen=True)
class CondInjector:
    """Additive per-frame feature injection at selected layers.

    The projection is a frozen seeded map so injection is a fixed linear
    function of the features; zero features contribute exactly zero.
    """

    cond_dim: int
    latent_dim: int
    injection_layers: frozenset[int]
    scale: float = 0.5
    projection: Tensor2D = field(init=False)

    def __post_init__(self):
        p, _ = normal_matrix(
            RngState(fold_seed(_INJECT_SEED, self.cond_dim, self.latent_dim)),
            self.cond_dim,
            self.latent_dim,
        )
        p = p * (self.scale / np.sqrt(self.cond_dim))
        p.setflags(write=False)
        object.__setattr__(self, "projection", p)
        object.__setattr__(self, "injection_layers", frozenset(self.injection_layers))

    def inject(self, tokens: Tensor2D, conds: Tensor2D, layer: int) -> Tensor2D:
        """tokens + conds @ projection at injection layers, identity elsewhere."""
        if layer not in self.injection_layers:
            return tokens
        if conds.shape[0] != tokens.shape[0]:
            raise ValueError(
                f"{tokens.shape[0]} token rows but {conds.shape[0]} cond rows"
            )
        if conds.shape[1] != self.cond_dim:
            raise ValueError(f"cond width {conds.shape[1]} != cond_dim {self.cond_dim}")
        return tokens + conds @ self.projection
