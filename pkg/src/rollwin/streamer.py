"""Online rolling-window denoising loop with bounded look-ahead.

Each streaming step runs N joint denoising passes over an L-block window whose
blocks sit at strictly increasing noise stages, emits the leftmost block once
it reaches the cleanest stage, captures that block's clean keys/values into the
temporal cache, slides the window, and appends a fresh noise block.  Per-step
cost depends only on the window and cache sizes, never on elapsed stream
length.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .conditioning import CondInjector
from .denoiser import DenoiserParams, build_anchors, encode_clean_block, forward_window
from .errors import ConfigError, LookaheadUnderrunError, StateCorruptionError
from .kvcache import CacheEntry, LayerCache, TemporalCache, temporal_push
from .linalg import RngState, fold_seed, normal_matrix
from .schedule import (
    Block,
    StageSchedule,
    StreamConfig,
    Window,
    build_schedule,
    renoise_to_time,
    slide,
    substep_times,
)


@dataclass(frozen=True)
class LedgerRow:
    """Per-step timing and context-geometry sample."""

    step: int
    wall_ns: int
    context_rows: int
    u_i: int


@dataclass(frozen=True)
class LatencyReport:
    steady_state_per_frame_s: float
    audio_lookahead_s: float
    end_to_end_delay_s: float
    rows: tuple
    frame_delays_s: tuple = ()

    def ledger_csv_rows(self):
        return [(r.step, r.wall_ns, r.context_rows) for r in self.rows]


@dataclass
class StreamState:
    cfg: StreamConfig
    params: DenoiserParams
    injector: CondInjector
    sched: StageSchedule
    blocks: list
    caches: list
    rng: RngState
    step_i: int = 0
    next_block_index: int = 0
    update_counters: dict = field(default_factory=dict)
    ledger: list = field(default_factory=list)
    emitted_count: int = 0


@dataclass
class StreamAux:
    """Side-channel record for offline analysis; not part of the frame output."""

    state: StreamState
    n_steps: int


def init_stream(cfg, params, reference, seed, injector=None, anchor_cond_features=None):
    """Build a fresh stream state: style anchors per layer, empty caches, empty window."""
    if cfg.latent_dim != params.cfg.latent_dim:
        raise ConfigError(
            f"stream latent_dim {cfg.latent_dim} != model latent_dim {params.cfg.latent_dim}"
        )
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != (cfg.anchor_tokens, cfg.latent_dim):
        raise ConfigError(
            f"reference shape {reference.shape} != ({cfg.anchor_tokens}, {cfg.latent_dim})"
        )
    if injector is None:
        injector = params.cfg.make_injector()
    anchors = [None] * params.cfg.n_layers
    if cfg.use_style_anchor:
        stale = None
        if not cfg.anchor_zero_pad:
            if anchor_cond_features is None:
                raise ConfigError(
                    "anchor_zero_pad=False requires explicit anchor_cond_features"
                )
            stale = np.asarray(anchor_cond_features, dtype=np.float64)
        anchors = build_anchors(
            params, reference, injector, offset_d=cfg.anchor_offset_d,
            start_position=0, cond_features=stale,
        )
    caches = [
        LayerCache(anchor=a, temporal=TemporalCache(cfg.cache_budget_tokens))
        for a in anchors
    ]
    return StreamState(
        cfg=cfg,
        params=params,
        injector=injector,
        sched=build_schedule(cfg),
        blocks=[],
        caches=caches,
        rng=RngState(fold_seed(seed, "stream")),
    )


def _fresh_block(state):
    noise, state.rng = normal_matrix(state.rng, state.cfg.B, state.cfg.latent_dim)
    block = Block(
        block_index=state.next_block_index,
        stage=state.cfg.L,
        frames=noise,
        noise_draw=noise,
    )
    state.next_block_index += 1
    return block


def _renoise_draw(state, block):
    if not state.cfg.fresh_noise_renoise:
        return block.noise_draw
    noise, state.rng = normal_matrix(state.rng, state.cfg.B, state.cfg.latent_dim)
    return noise


def step(state, cond_features):
    """Advance the stream one step; returns the emitted clean block or None."""
    t0 = time.monotonic_ns()
    cfg = state.cfg
    sched = state.sched
    state.step_i += 1
    if len(state.blocks) < cfg.L:
        state.blocks.append(_fresh_block(state))

    start = state.blocks[0].block_index * cfg.B
    n_window = len(state.blocks) * cfg.B
    cond_features = np.asarray(cond_features, dtype=np.float64)
    if cond_features.shape[0] < start + n_window:
        raise LookaheadUnderrunError(
            f"step {state.step_i} needs conditioning through frame "
            f"{start + n_window - 1}, have {cond_features.shape[0]} frames"
        )
    conds = cond_features[start : start + n_window]

    x0_blocks = None
    res = None
    for pass_idx in range(cfg.N):
        times = np.array(
            [substep_times(b.stage, sched, cfg.N)[pass_idx] for b in state.blocks]
        )
        frames = np.concatenate([b.frames for b in state.blocks], axis=0)
        pred, res = forward_window(
            state.params, frames, times, cfg.B, start, conds,
            state.injector, state.caches, reindex=cfg.rope_reindex,
        )
        x0_blocks = pred.blocks()
        for b in state.blocks:
            state.update_counters[b.block_index] = (
                state.update_counters.get(b.block_index, 0) + 1
            )
        if pass_idx < cfg.N - 1:
            moved = []
            for b, x0 in zip(state.blocks, x0_blocks):
                noise = _renoise_draw(state, b)
                t_next = substep_times(b.stage, sched, cfg.N)[pass_idx + 1]
                moved.append(
                    replace(b, frames=renoise_to_time(x0, noise, t_next), noise_draw=noise)
                )
            state.blocks = moved

    emitted = None
    if len(state.blocks) == cfg.L and state.blocks[0].stage == 1:
        emitted = x0_blocks[0]
        head_index = state.blocks[0].block_index
        count = state.update_counters.pop(head_index, 0)
        if count != cfg.L * cfg.N:
            raise StateCorruptionError(
                f"block {head_index} emitted after {count} passes, expected {cfg.L * cfg.N}"
            )
        positions = np.arange(start, start + cfg.B, dtype=np.int64)
        clean_kv = encode_clean_block(
            state.params, emitted, positions, conds[: cfg.B],
            state.injector, state.caches, reindex=cfg.rope_reindex,
        )
        for cache, (k_rot, v) in zip(state.caches, clean_kv):
            temporal_push(
                cache.temporal,
                CacheEntry(block_index=head_index, positions=positions, keys=k_rot, values=v),
            )
        window = Window(
            tuple(replace(b, noise_draw=_renoise_draw(state, b)) for b in state.blocks)
        )
        _, new_window = slide(window, x0_blocks, _fresh_block(state), sched)
        state.blocks = list(new_window.blocks)
        state.emitted_count += cfg.B
    else:
        moved = []
        for b, x0 in zip(state.blocks, x0_blocks):
            noise = _renoise_draw(state, b)
            target = sched.time_of(b.stage - 1)
            moved.append(
                Block(
                    block_index=b.block_index,
                    stage=b.stage - 1,
                    frames=renoise_to_time(x0, noise, target),
                    noise_draw=noise,
                )
            )
        state.blocks = moved

    state.ledger.append(
        LedgerRow(
            step=state.step_i,
            wall_ns=time.monotonic_ns() - t0,
            context_rows=res.context_rows,
            u_i=res.u_i,
        )
    )
    return emitted


def build_report(cfg, ledger, steady_fraction=0.5, frame_delays=()):
    """Summarize a latency ledger; empty ledgers report zero compute."""
    lookahead = cfg.lookahead_seconds
    rows = tuple(ledger)
    if not rows:
        return LatencyReport(0.0, lookahead, lookahead, rows, tuple(frame_delays))
    tail = rows[int(len(rows) * steady_fraction) :] or rows
    median_step_s = float(np.median([r.wall_ns for r in tail])) / 1e9
    if frame_delays:
        block_last = frame_delays[cfg.B - 1 :: cfg.B]
        steady = block_last[int(len(block_last) * steady_fraction) :] or block_last
        end_to_end = float(np.median(steady))
    else:
        end_to_end = lookahead + median_step_s
    return LatencyReport(
        steady_state_per_frame_s=median_step_s / cfg.B,
        audio_lookahead_s=lookahead,
        end_to_end_delay_s=end_to_end,
        rows=rows,
        frame_delays_s=tuple(frame_delays),
    )


def run(cfg, params, reference, cond_features, total_frames, seed,
        injector=None, anchor_cond_features=None, steady_fraction=0.5):
    """Drive the stream until total_frames frames have been emitted."""
    if total_frames < 0:
        raise ConfigError("total_frames must be non-negative")
    state = init_stream(
        cfg, params, reference, seed,
        injector=injector, anchor_cond_features=anchor_cond_features,
    )
    out = []
    emitted = 0
    while emitted < total_frames:
        block = step(state, cond_features)
        if block is not None:
            out.append(block)
            emitted += cfg.B
    if out:
        frames = np.concatenate(out, axis=0)[:total_frames]
    else:
        frames = np.zeros((0, cfg.latent_dim))
    report = build_report(cfg, state.ledger, steady_fraction)
    return frames, report, StreamAux(state=state, n_steps=state.step_i)


def measure_delay(cfg, params, reference, cond_features, total_frames, seed,
                  injector=None, anchor_cond_features=None, steady_fraction=0.5):
    """Latency protocol on a simulated arrival clock.

    Conditioning frame t arrives at simulated time t/fps; a step may start only
    once its whole window's conditioning has arrived.  Measured compute is added
    on top, and each frame's delay is emit time minus its own arrival time.
    Initialization and I/O are outside the clock.
    """
    state = init_stream(
        cfg, params, reference, seed,
        injector=injector, anchor_cond_features=anchor_cond_features,
    )
    sim_now = 0.0
    delays = []
    emitted = 0
    while emitted < total_frames:
        last_needed = (state.step_i + 1) * cfg.B - 1
        sim_now = max(sim_now, last_needed / cfg.fps)
        t0 = time.monotonic_ns()
        block = step(state, cond_features)
        sim_now += (time.monotonic_ns() - t0) / 1e9
        if block is not None:
            for j in range(cfg.B):
                delays.append(sim_now - (emitted + j) / cfg.fps)
            emitted += cfg.B
    return build_report(cfg, state.ledger, steady_fraction, frame_delays=tuple(delays))
