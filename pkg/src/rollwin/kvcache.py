"""Dual-anchor attention context: style anchor plus rolling temporal cache.

The style anchor holds pre-rotation keys for a frozen reference frame and is
re-rotated every step to a virtual position tied to the current context
start, so its relative offset to the stream never changes.  The temporal
cache holds post-rotation keys of recently emitted clean blocks at their
true absolute positions under a fixed token budget with block-granular
FIFO eviction.  Assembled row order is always [anchor | temporal | window].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StateCorruptionError
from .linalg import RopeConfig, Tensor2D, rope_rows


@dataclass(frozen=True)
class StyleAnchor:
    """Frozen reference-frame KV for one attention layer.

    All anchor tokens stand for a single reference frame and therefore share
    one (virtual) position.  Keys are stored before rotation; values need no
    position treatment.  frozen_position is the absolute position the anchor
    had at stream start, used only when re-indexing is disabled.
    """

    pre_rope_keys: Tensor2D
    values: Tensor2D
    offset_d: int
    frozen_position: int

    def __post_init__(self):
        if self.pre_rope_keys.shape[0] < 1:
            raise ValueError("anchor needs at least one token")
        if self.pre_rope_keys.shape != self.values.shape:
            raise ValueError(
                f"anchor key shape {self.pre_rope_keys.shape} != value shape {self.values.shape}"
            )
        self.pre_rope_keys.setflags(write=False)
        self.values.setflags(write=False)

    @property
    def n_tokens(self) -> int:
        return self.pre_rope_keys.shape[0]


def anchor_reindex(anchor: StyleAnchor, u_i: int, rope_cfg: RopeConfig) -> Tensor2D:
    """Rotate the anchor keys to virtual position u_i + d (shared by all rows)."""
    pos = float(u_i + anchor.offset_d)
    positions = np.full(anchor.n_tokens, pos)
    return rope_rows(anchor.pre_rope_keys, positions, rope_cfg)


@dataclass(frozen=True)
class CacheEntry:
    """Post-rotation KV of one clean block at its absolute frame positions."""

    block_index: int
    positions: np.ndarray
    keys: Tensor2D
    values: Tensor2D

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ValueError("entry keys/values shape mismatch")
        if self.positions.shape[0] != self.keys.shape[0]:
            raise ValueError("one position per cached token required")
        if self.positions.shape[0] > 1 and not (np.diff(self.positions) > 0).all():
            raise ValueError("cached positions must be strictly increasing")

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[0]


@dataclass
class TemporalCache:
    """FIFO of clean-block KV entries bounded by a token budget.

    Budget 0 keeps the cache permanently empty (temporal anchor disabled).
    Eviction removes whole blocks, oldest first, until the total fits.
    """

    budget_tokens: int
    entries: list[CacheEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.budget_tokens < 0:
            raise ValueError(f"budget_tokens must be >= 0, got {self.budget_tokens}")

    @property
    def total_tokens(self) -> int:
        return sum(e.n_tokens for e in self.entries)

    @property
    def block_indices(self) -> list[int]:
        return [e.block_index for e in self.entries]

    def first_position(self) -> int | None:
        return int(self.entries[0].positions[0]) if self.entries else None

    def push(self, entry: CacheEntry) -> None:
        if self.entries and entry.block_index <= self.entries[-1].block_index:
            raise StateCorruptionError(
                f"push of block {entry.block_index} not after cached block "
                f"{self.entries[-1].block_index}"
            )
        self.entries.append(entry)
        while self.entries and self.total_tokens > self.budget_tokens:
            self.entries.pop(0)

    def stacked(self) -> tuple[Tensor2D, Tensor2D, np.ndarray]:
        """(keys, values, positions) over all entries; zero-row arrays when empty."""
        if not self.entries:
            head = 0
            return (np.empty((0, head)), np.empty((0, head)), np.empty(0, dtype=np.int64))
        keys = np.concatenate([e.keys for e in self.entries], axis=0)
        values = np.concatenate([e.values for e in self.entries], axis=0)
        positions = np.concatenate([e.positions for e in self.entries])
        return keys, values, positions

    def snapshot(self) -> str:
        """Line-oriented state dump for golden tests."""
        lines = [f"budget_tokens={self.budget_tokens} total_tokens={self.total_tokens}"]
        for e in self.entries:
            pos = ",".join(str(int(p)) for p in e.positions)
            lines.append(f"block={e.block_index} tokens={e.n_tokens} positions=[{pos}]")
        return "\n".join(lines)


def temporal_push(cache: TemporalCache, entry: CacheEntry) -> TemporalCache:
    """Functional wrapper around TemporalCache.push returning the same cache."""
    cache.push(entry)
    return cache


@dataclass
class LayerCache:
    """Per-attention-layer pairing of the two context sources."""

    anchor: StyleAnchor | None
    temporal: TemporalCache


@dataclass(frozen=True)
class AssembledContext:
    """Concatenated context KV in the mandated [anchor | temporal | window] order."""

    keys: Tensor2D
    values: Tensor2D
    segment_labels: tuple[str, ...]
    n_anchor: int
    n_temporal: int
    n_window: int
    u_i: int

    @property
    def n_rows(self) -> int:
        return self.keys.shape[0]


def context_start_position(temporal: TemporalCache, window_positions: np.ndarray) -> int:
    """Absolute position of the first non-anchor context token.

    This is the first cached frame when the temporal cache holds anything,
    otherwise the first window frame; the anchor's virtual position hangs
    off it by the configured offset.
    """
    first_cached = temporal.first_position()
    if first_cached is not None:
        return first_cached
    if window_positions.shape[0] == 0:
        raise ValueError("cannot locate the context start of an empty context")
    return int(window_positions[0])


def assemble(
    layer: LayerCache,
    window_keys_rot: Tensor2D,
    window_values: Tensor2D,
    window_positions: np.ndarray,
    rope_cfg: RopeConfig,
    reindex: bool = True,
) -> AssembledContext:
    """Concatenate [anchor | temporal | window] keys and values for one layer.

    Window keys arrive already rotated at their true absolute positions.
    The anchor is rotated here: at u_i + d normally, or at its frozen
    start-of-stream position when reindex is off (ablation).  Cached and
    window positions must be contiguous (no dropped frames in between).
    """
    if window_keys_rot.shape != window_values.shape:
        raise ValueError("window keys/values shape mismatch")
    if window_positions.shape[0] != window_keys_rot.shape[0]:
        raise ValueError("one position per window token required")

    t_keys, t_values, t_positions = layer.temporal.stacked()
    if t_positions.shape[0] > 0 and window_positions.shape[0] > 0:
        gap = int(window_positions[0]) - int(t_positions[-1])
        if gap != 1:
            raise StateCorruptionError(
                f"window starts at {int(window_positions[0])} but cache ends at "
                f"{int(t_positions[-1])}; context must be contiguous"
            )

    u_i = context_start_position(layer.temporal, window_positions)

    parts_k, parts_v, labels = [], [], []
    n_anchor = 0
    if layer.anchor is not None:
        if reindex:
            anchor_keys = anchor_reindex(layer.anchor, u_i, rope_cfg)
        else:
            positions = np.full(layer.anchor.n_tokens, float(layer.anchor.frozen_position))
            anchor_keys = rope_rows(layer.anchor.pre_rope_keys, positions, rope_cfg)
        n_anchor = layer.anchor.n_tokens
        parts_k.append(anchor_keys)
        parts_v.append(layer.anchor.values)
        labels.extend(["anchor"] * n_anchor)
    if t_keys.shape[0] > 0:
        parts_k.append(t_keys)
        parts_v.append(t_values)
        labels.extend(["temporal"] * t_keys.shape[0])
    parts_k.append(window_keys_rot)
    parts_v.append(window_values)
    labels.extend(["window"] * window_keys_rot.shape[0])

    return AssembledContext(
        keys=np.concatenate(parts_k, axis=0),
        values=np.concatenate(parts_v, axis=0),
        segment_labels=tuple(labels),
        n_anchor=n_anchor,
        n_temporal=t_keys.shape[0],
        n_window=window_keys_rot.shape[0],
        u_i=u_i,
    )
