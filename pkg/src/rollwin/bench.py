"""Benchmark harness: window-grid sweeps, anchor ablations, causal baselines, latency."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .distill import (
    LabConfig,
    distill_dmd,
    ode_backfill,
    ode_regress,
    teacher_forced_caches,
)
from .denoiser import forward_window
from .errors import ConfigError, RollwinError
from .io import format_cell
from .linalg import fold_seed, rope_apply
from .metrics import MetricsRecord, compute_metrics, median_record
from .schedule import StreamConfig, build_schedule, renoise_to_time
from .streamer import run

GRID_HEADER = (
    "L", "N", "budget", "drift_total", "drift_last",
    "flicker_total", "flicker_last", "sync_corr", "latency_ms",
)

ABLATION_MODES = (
    "full",
    "no_style_anchor",
    "no_temporal_anchor",
    "no_anchor_zero_pad",
    "no_rope_reindex",
)

BASELINE_NAMES = ("two_stage", "one_step_adapted", "causal_ode")


def max_total_frames(cfg: StreamConfig, clip_frames: int) -> int:
    """Largest block-aligned emission count a clip of this length can drive."""
    usable = clip_frames - cfg.lookahead_frames
    return max(0, (usable // cfg.B) * cfg.B)


# ---------------------------------------------------------------------------
# Single rollout -> metrics


def rollout_record(params, cfg, clip, lift, seed, total_frames,
                   injector=None, anchor_cond_features=None):
    """Stream one clip's conditioning and score the emitted frames."""
    reference = clip.frames[: cfg.anchor_tokens]
    frames, report, aux = run(
        cfg, params, reference, clip.cond_features, total_frames, seed,
        injector=injector, anchor_cond_features=anchor_cond_features,
    )
    record = compute_metrics(
        frames, reference, clip.raw_cond, lift, cfg.B, latency_report=report,
    )
    return record, aux


def eval_rollouts(params, cfg, dataset, clip_ids, seeds, total_frames,
                  injector=None, anchor_cond_features=None):
    """Median MetricsRecord over clip x seed rollouts; per-run errors collected."""
    records, errors = [], []
    for cid in clip_ids:
        clip = dataset.clips[cid]
        for seed in seeds:
            try:
                rec, _ = rollout_record(
                    params, cfg, clip, dataset.lift, seed, total_frames,
                    injector=injector, anchor_cond_features=anchor_cond_features,
                )
                records.append(rec)
            except RollwinError as exc:
                errors.append(f"clip={cid} seed={seed}: {exc}")
    rec = median_record(records) if records else None
    return rec, len(records), errors


# ---------------------------------------------------------------------------
# (L, N) grid


@dataclass(frozen=True)
class GridCell:
    L: int
    N: int
    record: MetricsRecord | None
    n_runs: int
    error: str | None

    @property
    def budget(self) -> int:
        return self.L * self.N


@dataclass(frozen=True)
class GridResult:
    cells: tuple

    def cell(self, L: int, N: int) -> GridCell:
        for c in self.cells:
            if c.L == L and c.N == N:
                return c
        raise KeyError((L, N))

    def csv_rows(self):
        rows = [list(GRID_HEADER)]
        for c in self.cells:
            if c.record is None:
                body = [format_cell(float("nan"))] * 6
            else:
                body = c.record.csv_cells()
            rows.append([str(c.L), str(c.N), str(c.budget)] + body)
        return rows


def grid_sweep(params, dataset, clip_ids, seeds, base_cfg, L_list, N_list,
               total_frames=None, injector=None):
    """Run the streamer over every (L, N) cell and aggregate medians.

    A failed run is recorded on its cell and the sweep continues.  All cells
    share one emission length so metrics are comparable across the grid.
    """
    if not seeds:
        raise ConfigError("grid_sweep needs at least one seed")
    if total_frames is None:
        clip_len = min(dataset.clips[c].frames.shape[0] for c in clip_ids)
        worst = replace(base_cfg, L=max(L_list), N=1)
        total_frames = max_total_frames(worst, clip_len)
    if total_frames < base_cfg.B:
        raise ConfigError("clips too short for the largest window in the sweep")
    cells = []
    for L in L_list:
        for N in N_list:
            cfg = replace(base_cfg, L=L, N=N)
            rec, n_runs, errors = eval_rollouts(
                params, cfg, dataset, clip_ids, seeds, total_frames,
                injector=injector,
            )
            cells.append(GridCell(
                L=L, N=N, record=rec, n_runs=n_runs,
                error="; ".join(errors) if errors else None,
            ))
    return GridResult(cells=tuple(cells))


# ---------------------------------------------------------------------------
# Anchor ablations


@dataclass(frozen=True)
class AblationOutcome:
    mode: str
    record: MetricsRecord | None
    n_runs: int
    steady_context_rows: int
    anchor_cond_energy: float
    error: str | None


def ablation_config(base_cfg: StreamConfig, mode: str) -> StreamConfig:
    """Map an ablation name onto the single config flag it toggles."""
    if mode == "full":
        return base_cfg
    if mode == "no_style_anchor":
        return replace(base_cfg, use_style_anchor=False)
    if mode == "no_temporal_anchor":
        return replace(base_cfg, cache_budget_tokens=0)
    if mode == "no_anchor_zero_pad":
        return replace(base_cfg, anchor_zero_pad=False)
    if mode == "no_rope_reindex":
        return replace(base_cfg, rope_reindex=False)
    raise ConfigError(f"unknown ablation mode {mode!r}")


def ablate(params, dataset, clip_ids, seeds, base_cfg, modes=ABLATION_MODES,
           total_frames=None, injector=None):
    """One MetricsRecord per ablation mode over shared clips and seeds."""
    if total_frames is None:
        clip_len = min(dataset.clips[c].frames.shape[0] for c in clip_ids)
        total_frames = max_total_frames(base_cfg, clip_len)
    outcomes = []
    for mode in modes:
        cfg = ablation_config(base_cfg, mode)
        records, errors = [], []
        steady_rows = 0
        energy = 0.0
        for cid in clip_ids:
            clip = dataset.clips[cid]
            anchor_cond = None
            if not cfg.anchor_zero_pad:
                anchor_cond = clip.cond_features[: cfg.anchor_tokens]
            for seed in seeds:
                try:
                    rec, aux = rollout_record(
                        params, cfg, clip, dataset.lift, seed, total_frames,
                        injector=injector, anchor_cond_features=anchor_cond,
                    )
                    records.append(rec)
                    steady_rows = aux.state.ledger[-1].context_rows
                    if anchor_cond is not None:
                        energy = float(np.sum(anchor_cond ** 2))
                except RollwinError as exc:
                    errors.append(f"clip={cid} seed={seed}: {exc}")
        outcomes.append(AblationOutcome(
            mode=mode,
            record=median_record(records) if records else None,
            n_runs=len(records),
            steady_context_rows=steady_rows,
            anchor_cond_energy=energy,
            error="; ".join(errors) if errors else None,
        ))
    return outcomes


# ---------------------------------------------------------------------------
# Anchor alignment probe


@dataclass(frozen=True)
class ProbeResult:
    """Self-alignment logits between the anchor key and the window start.

    logits is the full rotary dot product; slow_band keeps only the lowest
    frequency rotation pair, whose phase mismatch accumulates slowly enough
    to stay in the decreasing half-period over long runs.
    """

    logits: np.ndarray
    slow_band: np.ndarray
    key_positions: np.ndarray


def anchor_logit_probe(pre_rope_keys, u_history, rope_cfg, offset_d,
                       reindex=True, frozen_position=-1):
    """Probe anchor attention alignment along a recorded stream.

    The probe query is the anchor's own mean key rotated to each recorded
    window start, so the logit isolates the positional phase term: with
    re-indexing the query/key distance is constant, without it the distance
    grows with stream depth.
    """
    k = np.asarray(pre_rope_keys, dtype=np.float64).mean(axis=0)
    norm = float(np.linalg.norm(k))
    if norm > 0.0:
        k = k / norm
    scale = 1.0 / math.sqrt(rope_cfg.head_dim)
    logits, slow, kpos = [], [], []
    for u in u_history:
        q_rot = rope_apply(k, int(u), rope_cfg)
        p = int(u) + offset_d if reindex else frozen_position
        k_rot = rope_apply(k, int(p), rope_cfg)
        logits.append(float(q_rot @ k_rot) * scale)
        slow.append(float(q_rot[-2:] @ k_rot[-2:]) * scale)
        kpos.append(p)
    return ProbeResult(
        logits=np.array(logits, dtype=np.float64),
        slow_band=np.array(slow, dtype=np.float64),
        key_positions=np.array(kpos, dtype=np.int64),
    )


def probe_from_stream(aux, cfg, layer=0, steady_only=True):
    """Run the alignment probe on a finished stream's own ledger and anchor."""
    anchor = aux.state.caches[layer].anchor
    if anchor is None:
        raise ConfigError("stream ran without a style anchor; nothing to probe")
    rows = aux.state.ledger
    if steady_only:
        rows = [r for r in rows if r.u_i > 0]
    u_history = [r.u_i for r in rows]
    rope_cfg = aux.state.params.cfg.rope
    return anchor_logit_probe(
        anchor.pre_rope_keys, u_history, rope_cfg, cfg.anchor_offset_d,
        reindex=cfg.rope_reindex, frozen_position=anchor.frozen_position,
    )


# ---------------------------------------------------------------------------
# Strictly causal baselines


@dataclass(frozen=True)
class BaselineResult:
    name: str
    record: MetricsRecord | None
    n_runs: int
    error: str | None


def causal_config(base_cfg: StreamConfig) -> StreamConfig:
    return replace(base_cfg, L=1, N=1)


def train_causal_ode_student(teacher, dataset, lab: LabConfig, cfg_l1, seed,
                             injector=None):
    """Single-block student trained by endpoint regression only."""
    pairs = ode_backfill(
        teacher, dataset, lab.n_pairs, lab.n_ode_steps,
        fold_seed(seed, "causal-ode-pairs"),
        stage_times=(1.0,), clip_ids=lab.train_ids(), cfg=cfg_l1,
        injector=injector,
    )
    student, curve = ode_regress(
        teacher, pairs, dataset, cfg_l1, lab.stage1_steps,
        fold_seed(seed, "causal-ode-sgd"),
        lr=lab.stage1_lr, momentum=lab.momentum, batch=lab.stage1_batch,
        injector=injector,
    )
    return student, curve


def train_one_step_adapted_student(teacher, dataset, lab: LabConfig, cfg_l1,
                                   seed, injector=None):
    """Single-block student trained by distribution matching only."""
    student, critic, curve = distill_dmd(
        teacher, teacher, dataset, cfg_l1, lab,
        fold_seed(seed, "causal-dmd"), injector=injector,
    )
    return student, curve


def causal_baselines(teacher, two_stage_student, dataset, lab: LabConfig,
                     base_cfg, clip_ids, seeds, total_frames=None,
                     injector=None, seed=0, eval_dataset=None):
    """Table of the full student against the two single-block baselines.

    Baselines train on `dataset`; rollout scoring uses `eval_dataset` when
    given (held-out clips, typically longer), else the training corpus.
    """
    cfg_l1 = causal_config(base_cfg)
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    if total_frames is None:
        clip_len = min(eval_ds.clips[c].frames.shape[0] for c in clip_ids)
        total_frames = max_total_frames(base_cfg, clip_len)
    jobs = []
    jobs.append(("two_stage", two_stage_student, base_cfg, None))
    try:
        adapted, _ = train_one_step_adapted_student(
            teacher, dataset, lab, cfg_l1, seed, injector=injector)
        jobs.append(("one_step_adapted", adapted, cfg_l1, None))
    except RollwinError as exc:
        jobs.append(("one_step_adapted", None, cfg_l1, str(exc)))
    try:
        causal, _ = train_causal_ode_student(
            teacher, dataset, lab, cfg_l1, seed, injector=injector)
        jobs.append(("causal_ode", causal, cfg_l1, None))
    except RollwinError as exc:
        jobs.append(("causal_ode", None, cfg_l1, str(exc)))
    results = []
    for name, params, cfg, err in jobs:
        if params is None:
            results.append(BaselineResult(name, None, 0, err))
            continue
        rec, n_runs, errors = eval_rollouts(
            params, cfg, eval_ds, clip_ids, seeds, total_frames,
            injector=injector,
        )
        results.append(BaselineResult(
            name, rec, n_runs, "; ".join(errors) if errors else None,
        ))
    return results


# ---------------------------------------------------------------------------
# Stage variance deficit


def variance_deficit(params, dataset, cfg, clip_ids, seed, n_draws=48,
                     injector=None):
    """Per-stage contraction of one-pass predictions versus clean data.

    Clean windows are renoised to the stage ladder with fresh draws and pushed
    through one joint pass under teacher-forced caches.  A deficit of 0 means
    the stage's predictions carry full data variance; near 1 means the one-step
    map collapses toward a conditional mean at that noise level.
    """
    from .linalg import RngState, normal_matrix

    if injector is None:
        injector = params.cfg.make_injector()
    sched = build_schedule(cfg)
    times = np.array([sched.time_of(s) for s in range(1, cfg.L + 1)])
    preds = {s: [] for s in range(1, cfg.L + 1)}
    refs = {s: [] for s in range(1, cfg.L + 1)}
    rng = RngState(fold_seed(seed, "variance-deficit"))
    for draw in range(n_draws):
        pick, rng = _draw_choice(rng, len(clip_ids))
        clip = dataset.clips[clip_ids[pick]]
        n_frames = clip.frames.shape[0]
        n_starts = (n_frames - cfg.window_frames) // cfg.B + 1
        if n_starts <= 0:
            raise ConfigError("clips shorter than one window")
        wpick, rng = _draw_choice(rng, n_starts)
        w = wpick * cfg.B
        caches = teacher_forced_caches(params, clip, cfg, injector, w)
        blocks = []
        for j in range(cfg.L):
            lo = w + j * cfg.B
            clean = clip.frames[lo : lo + cfg.B]
            noise, rng = normal_matrix(rng, cfg.B, cfg.latent_dim)
            blocks.append(renoise_to_time(clean, noise, times[j]))
        frames = np.concatenate(blocks, axis=0)
        conds = clip.cond_features[w : w + cfg.window_frames]
        pred, _ = forward_window(
            params, frames, times, cfg.B, w, conds, injector, caches,
            reindex=cfg.rope_reindex,
        )
        for j in range(cfg.L):
            lo = w + j * cfg.B
            preds[j + 1].append(pred.block(j))
            refs[j + 1].append(clip.frames[lo : lo + cfg.B])
    out = {}
    for s in range(1, cfg.L + 1):
        p = np.concatenate(preds[s], axis=0)
        r = np.concatenate(refs[s], axis=0)
        var_p = float(np.mean(np.var(p, axis=0)))
        var_r = float(np.mean(np.var(r, axis=0)))
        deficit = 1.0 - var_p / var_r if var_r > 0.0 else 0.0
        out[s] = (float(times[s - 1]), deficit)
    return out


def conditional_spread_deficit(params, dataset, cfg, clip_ids, seed,
                               n_contexts=16, n_draws=8, injector=None):
    """Per-stage collapse of prediction spread under a fixed context.

    For each sampled context the caches and conditioning are held fixed while
    only the noise draw varies; the spread of the one-pass predictions across
    draws is compared against pooled data variance.  Unlike
    ``variance_deficit`` this removes between-window variation, so a positive
    deficit isolates mean-seeking behaviour at that noise level rather than
    mixing it with scene-to-scene spread.  Stages are probed with the whole
    window held at a single ladder time, top stage first.
    """
    from .linalg import RngState, normal_matrix, uniform

    if injector is None:
        injector = params.cfg.make_injector()
    sched = build_schedule(cfg)
    w_frames = cfg.window_frames
    spreads = {s: [] for s in range(1, cfg.L + 1)}
    data_rows = []
    for c in range(n_contexts):
        rng = RngState(fold_seed(seed, "spread", c))
        u, rng = uniform(rng, 2)
        clip = dataset.clips[clip_ids[int(u[0] * len(clip_ids)) % len(clip_ids)]]
        max_start = (clip.frames.shape[0] - w_frames) // cfg.B
        if max_start < 1:
            raise ConfigError("clips shorter than two windows")
        start_block = min(int(u[1] * max_start), max_start - 1) + 1
        lo = start_block * cfg.B
        caches = teacher_forced_caches(params, clip, cfg, injector, lo)
        clean = clip.frames[lo : lo + w_frames]
        conds = clip.cond_features[lo : lo + w_frames]
        data_rows.append(clean)
        for s in range(cfg.L, 0, -1):
            t_s = sched.time_of(s)
            times = np.full(cfg.L, t_s)
            preds = []
            for _ in range(n_draws):
                noise, rng = normal_matrix(rng, w_frames, cfg.latent_dim)
                x_t = renoise_to_time(clean, noise, t_s)
                pred, _ = forward_window(
                    params, x_t, times, cfg.B, lo, conds, injector, caches,
                    reindex=cfg.rope_reindex,
                )
                preds.append(pred.x0_tokens)
            spreads[s].append(float(np.stack(preds).var(axis=0).mean()))
    var_data = float(np.concatenate(data_rows, axis=0).var(axis=0).mean())
    out = {}
    for s in range(1, cfg.L + 1):
        deficit = 1.0 - float(np.mean(spreads[s])) / var_data if var_data > 0.0 else 0.0
        out[s] = (float(sched.time_of(s)), deficit)
    return out


def unit_time_deficit(deficits) -> float:
    """Deficit of the stage sitting at the top of the noise ladder."""
    top = max(deficits)
    return deficits[top][1]


def _draw_choice(rng, n):
    from .linalg import uniform

    u, rng = uniform(rng, 1)
    return min(int(u[0] * n), n - 1), rng


# ---------------------------------------------------------------------------
# Latency scaling


LATENCY_HEADER = ("L", "N", "budget", "per_frame_ms")


def latency_curve(params, base_cfg, L_list, N_list, n_steps=150, seed=0,
                  injector=None):
    """Median steady per-frame wall time for each (L, N) cell.

    Content-free inputs (zero conditioning, zero reference) keep the timing
    runs cheap; compute cost does not depend on values.
    """
    rows = []
    for L in L_list:
        for N in N_list:
            cfg = replace(base_cfg, L=L, N=N)
            total = n_steps * cfg.B
            conds = np.zeros((total + cfg.lookahead_frames, params.cfg.cond_dim))
            reference = np.zeros((cfg.anchor_tokens, cfg.latent_dim))
            _, report, _ = run(
                cfg, params, reference, conds, total, seed, injector=injector,
            )
            rows.append((L, N, L * N, report.steady_state_per_frame_s * 1e3))
    return rows


def latency_csv_rows(rows):
    out = [list(LATENCY_HEADER)]
    for L, N, budget, ms in rows:
        out.append([str(L), str(N), str(budget), format_cell(ms)])
    return out


def plot_latency(rows, path):
    """Static vector plot: per-frame time against N, one line per L."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "rollwin"
    fig, ax = plt.subplots(figsize=(6, 4))
    by_L = {}
    for L, N, _, ms in rows:
        by_L.setdefault(L, []).append((N, ms))
    for L in sorted(by_L):
        pts = sorted(by_L[L])
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                marker="o", label=f"window blocks = {L}")
    ax.set_xlabel("passes per step")
    ax.set_ylabel("per-frame wall time (ms)")
    ax.set_title("Streaming latency scaling")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
