"""Window mechanics for the rolling-block streaming denoiser.

A stream is processed as a window of L blocks (B frames each) held at
strictly increasing noise stages 1..L, left clean-most.  Each streaming
step denoises the whole window jointly, emits the leftmost block at the
clean endpoint, shifts every remaining block down one stage, and appends
a fresh pure-noise block on the right.  Everything here is a pure value
transition; the streamer module owns the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, StateCorruptionError
from .linalg import Tensor2D


@dataclass(frozen=True)
class StreamConfig:
    """Static parameters of one stream.

    L is the window length in blocks, N the number of joint denoising
    passes per streaming step, B the frames per block.  Noise stages live
    on [t_min, t_max] spaced by a power law with exponent shift_gamma
    (1.0 = linear).  anchor_offset_d is the signed virtual-position offset
    of the style anchor relative to the context start.  The boolean flags
    are ablation switches; the default configuration enables the full
    mechanism.
    """

    L: int = 4
    N: int = 1
    B: int = 4
    latent_dim: int = 16
    fps: float = 25.0
    t_min: float = 0.0
    t_max: float = 1.0
    shift_gamma: float = 1.0
    cache_budget_tokens: int = 8
    anchor_offset_d: int = -1
    anchor_tokens: int | None = None
    use_style_anchor: bool = True
    anchor_zero_pad: bool = True
    rope_reindex: bool = True
    fresh_noise_renoise: bool = False

    def __post_init__(self):
        if self.L < 1 or self.N < 1 or self.B < 1:
            raise ConfigError(f"L, N, B must be >= 1, got ({self.L}, {self.N}, {self.B})")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ConfigError(f"need 0 <= t_min < t_max <= 1, got [{self.t_min}, {self.t_max}]")
        if not self.shift_gamma > 0:
            raise ConfigError(f"shift_gamma must be positive, got {self.shift_gamma}")
        if self.cache_budget_tokens < 0:
            raise ConfigError(f"cache_budget_tokens must be >= 0, got {self.cache_budget_tokens}")
        if self.anchor_tokens is None:
            object.__setattr__(self, "anchor_tokens", self.B)
        if self.anchor_tokens < 1:
            raise ConfigError(f"anchor_tokens must be >= 1, got {self.anchor_tokens}")

    @property
    def lookahead_frames(self) -> int:
        """Future frames of conditioning the window holds beyond the emitted block."""
        return (self.L - 1) * self.B

    @property
    def lookahead_seconds(self) -> float:
        return self.lookahead_frames / self.fps

    @property
    def window_frames(self) -> int:
        return self.L * self.B


@dataclass(frozen=True)
class StageSchedule:
    """Noise times per stage: stage_times[s] is the time of stage s, stage 0 clean."""

    stage_times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.stage_times, dtype=np.float64)
        object.__setattr__(self, "stage_times", t)
        if t.ndim != 1 or t.shape[0] < 2:
            raise ConfigError("stage_times must be a 1-D array of at least 2 entries")
        if t[0] != 0.0:
            raise ConfigError(f"stage 0 must sit at time 0, got {t[0]}")
        if not (np.diff(t) > 0).all():
            raise ConfigError("stage times must be strictly increasing")

    @property
    def n_stages(self) -> int:
        return self.stage_times.shape[0] - 1

    def time_of(self, stage: int) -> float:
        if not 0 <= stage <= self.n_stages:
            raise ValueError(f"stage {stage} out of range [0, {self.n_stages}]")
        return float(self.stage_times[stage])


def build_schedule(cfg: StreamConfig) -> StageSchedule:
    """Power-law spacing from t_min to t_max over L stages, clean endpoint at 0."""
    s = np.arange(1, cfg.L + 1, dtype=np.float64)
    times = cfg.t_min + (cfg.t_max - cfg.t_min) * (s / cfg.L) ** cfg.shift_gamma
    return StageSchedule(np.concatenate([[0.0], times]))


@dataclass(frozen=True)
class Block:
    """B frames at one noise stage, with the frozen prior draw that renoises them."""

    block_index: int
    stage: int
    frames: Tensor2D
    noise_draw: Tensor2D

    def __post_init__(self):
        if self.block_index < 0:
            raise ValueError(f"block_index must be >= 0, got {self.block_index}")
        if self.stage < 0:
            raise ValueError(f"stage must be >= 0, got {self.stage}")
        if self.frames.shape != self.noise_draw.shape:
            raise ValueError(
                f"frames shape {self.frames.shape} != noise_draw shape {self.noise_draw.shape}"
            )


@dataclass(frozen=True)
class Window:
    """Exactly L blocks, consecutive indices, stages exactly (1..L) left to right."""

    blocks: tuple[Block, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        for pos, blk in enumerate(self.blocks):
            if blk.stage != pos + 1:
                raise StateCorruptionError(
                    f"window position {pos} holds stage {blk.stage}, expected {pos + 1}"
                )
            if pos > 0 and blk.block_index != self.blocks[pos - 1].block_index + 1:
                raise StateCorruptionError(
                    f"non-consecutive block indices at window position {pos}"
                )

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def start_frame(self) -> int:
        return self.blocks[0].block_index * self.blocks[0].frames.shape[0]

    def stacked_frames(self) -> Tensor2D:
        return np.concatenate([b.frames for b in self.blocks], axis=0)


def renoise_to_time(x0_hat: Tensor2D, noise_draw: Tensor2D, t: float) -> Tensor2D:
    """Forward-process point (1-t)*x0 + t*noise at an arbitrary time."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    return (1.0 - t) * x0_hat + t * noise_draw


def renoise_to_stage(
    x0_hat: Tensor2D, block: Block, target_stage: int, sched: StageSchedule
) -> Block:
    """Move a block to a stage by re-interpolating its prediction with its own noise.

    Stage 0 returns x0_hat bit-exactly (time 0 contributes no noise term);
    the frozen noise_draw carries over unchanged so replay is deterministic.
    """
    if not 0 <= target_stage <= sched.n_stages:
        raise ValueError(f"target stage {target_stage} out of range [0, {sched.n_stages}]")
    if x0_hat.shape != block.frames.shape:
        raise ValueError(f"x0_hat shape {x0_hat.shape} != block shape {block.frames.shape}")
    if target_stage == 0:
        frames = x0_hat
    else:
        frames = renoise_to_time(x0_hat, block.noise_draw, sched.time_of(target_stage))
    return replace(block, stage=target_stage, frames=frames)


def slide(
    window: Window,
    x0_hat_blocks: Sequence[Tensor2D],
    fresh: Block,
    sched: StageSchedule,
) -> tuple[Tensor2D, Window]:
    """Emit the leftmost block clean, shift every survivor down one stage, append fresh.

    x0_hat_blocks holds the final joint prediction for each current block.
    The fresh block must continue the index sequence at the top stage.
    """
    L = window.L
    if len(x0_hat_blocks) != L:
        raise ValueError(f"need {L} per-block predictions, got {len(x0_hat_blocks)}")
    last = window.blocks[-1]
    if fresh.block_index != last.block_index + 1:
        raise StateCorruptionError(
            f"fresh block index {fresh.block_index} does not follow {last.block_index}"
        )
    if fresh.stage != L:
        raise StateCorruptionError(f"fresh block must enter at stage {L}, got {fresh.stage}")
    emitted = np.asarray(x0_hat_blocks[0], dtype=np.float64)
    if emitted.shape != window.blocks[0].frames.shape:
        raise ValueError("emitted prediction shape does not match the leftmost block")
    shifted = [
        renoise_to_stage(x0_hat_blocks[k], window.blocks[k], window.blocks[k].stage - 1, sched)
        for k in range(1, L)
    ]
    return emitted, Window(tuple(shifted) + (fresh,))


def substep_times(stage: int, sched: StageSchedule, N: int) -> np.ndarray:
    """The N evaluation times of one streaming step for a block at the given stage.

    Entry k is t_s - k*(t_s - t_{s-1})/N; pass n evaluates at entry n-1 and
    the block is re-interpolated to entry n between passes.  The final move
    to t_{s-1} is performed by slide (or by emission at stage 1).
    """
    if not 1 <= stage <= sched.n_stages:
        raise ValueError(f"stage {stage} out of range [1, {sched.n_stages}]")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    t_hi = sched.time_of(stage)
    delta = t_hi - sched.time_of(stage - 1)
    return t_hi - (delta / N) * np.arange(N, dtype=np.float64)
