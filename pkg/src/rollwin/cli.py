"""Command-line entry points for the whole pipeline.

Every command reads one config file, writes its artifacts into --out, and
drops a fully resolved config copy (resolved.ini) next to them.  Exit codes:
0 success, 2 configuration problem, 3 training divergence, 4 violated
runtime invariant.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .bench import (
    ablate as run_ablations,
    causal_baselines,
    grid_sweep,
    latency_csv_rows,
    latency_curve,
    max_total_frames,
    plot_latency,
)
from .config import FullConfig, load_config, write_resolved
from .denoiser import checkpoint_tensors, init_params, params_from_checkpoint
from .distill import (
    distill_dmd,
    gen_dataset,
    ode_backfill,
    ode_regress,
    pairs_from_records,
    pairs_to_records,
    train_teacher,
)
from .errors import (
    ConfigError,
    NumericError,
    RollwinError,
    StateCorruptionError,
    TrainingDivergenceError,
)
from .io import (
    read_checkpoint,
    read_pairs,
    write_checkpoint,
    write_cond,
    write_csv,
    write_frames,
    write_pairs,
)
from .linalg import fold_seed
from .metrics import MetricsRecord, compute_metrics
from .schedule import build_schedule
from .streamer import run

CURVE_HEADER = ("step", "loss", "grad_norm")
METRICS_HEADER = (
    "drift_total", "drift_last", "flicker_total", "flicker_last",
    "sync_corr", "latency_ms",
)


# ---------------------------------------------------------------------------
# Shared plumbing


def _prepare(config_path, out) -> tuple[FullConfig, Path]:
    full = load_config(config_path)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(full, out_dir / "resolved.ini")
    return full, out_dir


def _task_kwargs(full: FullConfig) -> dict:
    t = full.task
    return dict(omega_base=t.omega_base, cond_gain=t.cond_gain,
                noise_floor=t.noise_floor, rho=t.rho,
                identity_drift=t.identity_drift)


def _train_dataset(full: FullConfig):
    return gen_dataset(
        full.lab.n_clips, full.lab.frames_per_clip,
        seed=fold_seed(full.run.seed, "train-data"),
        latent_dim=full.stream.latent_dim, cond_dim=full.model.cond_dim,
        **_task_kwargs(full),
    )


def _eval_dataset(full: FullConfig):
    return gen_dataset(
        full.run.eval_clips, full.run.eval_frames,
        seed=fold_seed(full.run.seed, "eval-data"),
        latent_dim=full.stream.latent_dim, cond_dim=full.model.cond_dim,
        **_task_kwargs(full),
    )


def _save_params(path, params) -> None:
    write_checkpoint(
        path, params.cfg.to_text(params.param_seed), checkpoint_tensors(params),
    )


def _load_params(path):
    try:
        config_text, tensors = read_checkpoint(path)
        return params_from_checkpoint(config_text, tensors)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None


def _write_curve(path, curve) -> None:
    write_csv(path, CURVE_HEADER, curve)


def _eval_total_frames(full: FullConfig) -> int:
    if full.run.total_frames > 0:
        return full.run.total_frames
    return max_total_frames(full.stream, full.run.eval_frames)


def _record_row(record: MetricsRecord):
    return [
        record.drift_total, record.drift_last, record.flicker_total,
        record.flicker_last, record.sync_corr, record.per_step_latency_ms,
    ]


CONFIG_OPT = click.option(
    "--config", "config_path", type=click.Path(), default=None,
    help="Config file; omitted means built-in defaults.",
)
OUT_OPT = click.option(
    "--out", default=".", show_default=True,
    help="Directory for artifacts and the resolved config copy.",
)


@click.group()
def cli():
    """Streaming windowed denoising: data, training, and benchmarks."""


# ---------------------------------------------------------------------------
# Data and training commands


@cli.command("gen-data")
@CONFIG_OPT
@OUT_OPT
def gen_data_cmd(config_path, out):
    """Write the synthetic clip corpus as binary frame and cond records."""
    full, out_dir = _prepare(config_path, out)
    ds = _train_dataset(full)
    for clip in ds.clips:
        stem = f"clip_{clip.clip_id:03d}"
        write_frames(out_dir / f"{stem}.frames.bin", clip.frames)
        write_cond(out_dir / f"{stem}.cond.bin", clip.raw_cond.reshape(-1, 1))
    click.echo(f"wrote {len(ds.clips)} clips to {out_dir}")


@cli.command("train-teacher")
@CONFIG_OPT
@OUT_OPT
def train_teacher_cmd(config_path, out):
    """Flow-matching teacher on the training clips; checkpoint plus loss curve."""
    full, out_dir = _prepare(config_path, out)
    ds = _train_dataset(full)
    lab = full.lab
    params, curve = train_teacher(
        full.model, ds, lab.teacher_steps, full.run.seed,
        lr=lab.teacher_lr, momentum=lab.momentum, batch=lab.teacher_batch,
        clip_ids=lab.train_ids(), cfg=full.stream,
    )
    _save_params(out_dir / "teacher.ckpt", params)
    _write_curve(out_dir / "teacher_curve.csv", curve)
    click.echo(f"teacher trained for {lab.teacher_steps} steps -> {out_dir}")


@cli.command("backfill")
@CONFIG_OPT
@OUT_OPT
@click.option("--teacher", default=None, help="Teacher checkpoint path.")
def backfill_cmd(config_path, out, teacher):
    """Record deterministic multi-step endpoints for one-step regression."""
    full, out_dir = _prepare(config_path, out)
    teacher_params = _load_params(teacher or out_dir / "teacher.ckpt")
    ds = _train_dataset(full)
    sched = build_schedule(full.stream)
    stage_times = tuple(sched.time_of(s) for s in range(1, full.stream.L + 1))
    pairs = ode_backfill(
        teacher_params, ds, full.lab.n_pairs, full.lab.n_ode_steps,
        full.run.seed, stage_times=stage_times,
        clip_ids=full.lab.train_ids(), cfg=full.stream,
    )
    write_pairs(out_dir / "pairs.bin", pairs_to_records(pairs))
    click.echo(f"recorded {len(pairs)} endpoint pairs -> {out_dir}")


@cli.command("distill-ode")
@CONFIG_OPT
@OUT_OPT
@click.option("--teacher", default=None, help="Teacher checkpoint path.")
@click.option("--pairs", "pairs_path", default=None, help="Endpoint pair file.")
def distill_ode_cmd(config_path, out, teacher, pairs_path):
    """Stage 1: regress a one-step student onto recorded endpoints."""
    full, out_dir = _prepare(config_path, out)
    teacher_params = _load_params(teacher or out_dir / "teacher.ckpt")
    try:
        records = read_pairs(pairs_path or out_dir / "pairs.bin")
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load pairs: {exc}") from None
    ds = _train_dataset(full)
    lab = full.lab
    student, curve = ode_regress(
        teacher_params, pairs_from_records(records), ds, full.stream,
        lab.stage1_steps, full.run.seed,
        lr=lab.stage1_lr, momentum=lab.momentum, batch=lab.stage1_batch,
    )
    _save_params(out_dir / "student_ode.ckpt", student)
    _write_curve(out_dir / "ode_curve.csv", curve)
    click.echo(f"stage-1 student trained for {lab.stage1_steps} steps -> {out_dir}")


@cli.command("distill-dmd")
@CONFIG_OPT
@OUT_OPT
@click.option("--teacher", default=None, help="Teacher checkpoint path.")
@click.option("--student", default=None, help="Stage-1 student checkpoint path.")
def distill_dmd_cmd(config_path, out, teacher, student):
    """Stage 2: distribution-matching post-training on rolling-window rollouts."""
    full, out_dir = _prepare(config_path, out)
    teacher_params = _load_params(teacher or out_dir / "teacher.ckpt")
    student_params = _load_params(student or out_dir / "student_ode.ckpt")
    ds = _train_dataset(full)
    tuned, critic, curve = distill_dmd(
        student_params, teacher_params, ds, full.stream, full.lab, full.run.seed,
    )
    _save_params(out_dir / "student_dmd.ckpt", tuned)
    _save_params(out_dir / "critic.ckpt", critic)
    _write_curve(out_dir / "dmd_curve.csv", curve)
    click.echo(f"stage-2 student tuned for {full.lab.dmd_steps} steps -> {out_dir}")


# ---------------------------------------------------------------------------
# Rollout and benchmark commands


@cli.command("stream")
@CONFIG_OPT
@OUT_OPT
@click.option("--checkpoint", default=None, help="Generator checkpoint path.")
@click.option("--clip", "clip_id", default=0, show_default=True,
              help="Held-out clip whose conditioning drives the stream.")
def stream_cmd(config_path, out, checkpoint, clip_id):
    """Stream one clip: emitted frames, step ledger, and metrics."""
    full, out_dir = _prepare(config_path, out)
    params = _load_params(checkpoint or out_dir / "student_dmd.ckpt")
    ds = _eval_dataset(full)
    if not 0 <= clip_id < len(ds.clips):
        raise ConfigError(f"clip {clip_id} outside the evaluation corpus")
    clip = ds.clips[clip_id]
    total = _eval_total_frames(full)
    reference = clip.frames[: full.stream.anchor_tokens]
    frames, report, aux = run(
        full.stream, params, reference, clip.cond_features, total, full.run.seed,
    )
    record = compute_metrics(
        frames, reference, clip.raw_cond, ds.lift, full.stream.B,
        latency_report=report,
    )
    write_frames(out_dir / "frames.bin", frames)
    write_csv(out_dir / "ledger.csv", ("step", "wall_ns", "context_rows"),
              [(r.step, r.wall_ns, r.context_rows) for r in aux.state.ledger])
    write_csv(out_dir / "metrics.csv", METRICS_HEADER, [_record_row(record)])
    click.echo(f"streamed {total} frames from clip {clip_id} -> {out_dir}")


@cli.command("bench-grid")
@CONFIG_OPT
@OUT_OPT
@click.option("--checkpoint", default=None, help="Generator checkpoint path.")
def bench_grid_cmd(config_path, out, checkpoint):
    """Sweep the window-length / pass-count grid and tabulate medians."""
    full, out_dir = _prepare(config_path, out)
    params = _load_params(checkpoint or out_dir / "student_dmd.ckpt")
    ds = _eval_dataset(full)
    clip_ids = list(range(len(ds.clips)))
    total = full.run.total_frames if full.run.total_frames > 0 else None
    result = grid_sweep(
        params, ds, clip_ids, list(full.run.seeds), full.stream,
        list(full.run.grid_l), list(full.run.grid_n), total_frames=total,
    )
    rows = result.csv_rows()
    write_csv(out_dir / "grid.csv", rows[0], rows[1:])
    n_err = sum(1 for c in result.cells if c.error)
    click.echo(f"grid of {len(result.cells)} cells ({n_err} failed) -> {out_dir}")


@cli.command("ablate")
@CONFIG_OPT
@OUT_OPT
@click.option("--checkpoint", default=None, help="Generator checkpoint path.")
def ablate_cmd(config_path, out, checkpoint):
    """Anchor ablation table over shared clips and seeds."""
    full, out_dir = _prepare(config_path, out)
    params = _load_params(checkpoint or out_dir / "student_dmd.ckpt")
    ds = _eval_dataset(full)
    clip_ids = list(range(len(ds.clips)))
    total = full.run.total_frames if full.run.total_frames > 0 else None
    outcomes = run_ablations(
        params, ds, clip_ids, list(full.run.seeds), full.stream,
        total_frames=total,
    )
    header = ("mode", "context_rows", "anchor_cond_energy") + METRICS_HEADER
    rows = []
    for o in outcomes:
        body = _record_row(o.record) if o.record else [float("nan")] * 6
        rows.append([o.mode, o.steady_context_rows, o.anchor_cond_energy] + body)
    write_csv(out_dir / "ablations.csv", header, rows)
    click.echo(f"{len(outcomes)} ablation modes -> {out_dir}")


@cli.command("baselines")
@CONFIG_OPT
@OUT_OPT
@click.option("--teacher", default=None, help="Teacher checkpoint path.")
@click.option("--student", default=None, help="Two-stage student checkpoint path.")
def baselines_cmd(config_path, out, teacher, student):
    """Train and score the strictly causal single-block baselines."""
    full, out_dir = _prepare(config_path, out)
    teacher_params = _load_params(teacher or out_dir / "teacher.ckpt")
    student_params = _load_params(student or out_dir / "student_dmd.ckpt")
    train_ds = _train_dataset(full)
    eval_ds = _eval_dataset(full)
    clip_ids = list(range(len(eval_ds.clips)))
    total = full.run.total_frames if full.run.total_frames > 0 else None
    results = causal_baselines(
        teacher_params, student_params, train_ds, full.lab, full.stream,
        clip_ids, list(full.run.seeds), total_frames=total,
        seed=full.run.seed, eval_dataset=eval_ds,
    )
    header = ("name",) + METRICS_HEADER
    rows = []
    for r in results:
        body = _record_row(r.record) if r.record else [float("nan")] * 6
        rows.append([r.name] + body)
    write_csv(out_dir / "baselines.csv", header, rows)
    click.echo(f"{len(results)} baseline rows -> {out_dir}")


@cli.command("latency-curve")
@CONFIG_OPT
@OUT_OPT
@click.option("--checkpoint", default=None,
              help="Checkpoint to time; omitted times a fresh initialization.")
def latency_curve_cmd(config_path, out, checkpoint):
    """Median steady per-frame wall time across the grid, as CSV and SVG."""
    full, out_dir = _prepare(config_path, out)
    if checkpoint is not None:
        params = _load_params(checkpoint)
    else:
        params = init_params(full.model, full.run.seed)
    rows = latency_curve(
        params, full.stream, list(full.run.grid_l), list(full.run.grid_n),
        n_steps=full.run.latency_steps, seed=full.run.seed,
    )
    csv_rows = latency_csv_rows(rows)
    write_csv(out_dir / "latency.csv", csv_rows[0], csv_rows[1:])
    plot_latency(rows, out_dir / "latency.svg")
    click.echo(f"timed {len(rows)} grid cells -> {out_dir}")


# ---------------------------------------------------------------------------
# Entry point with contractual exit codes


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 2
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except TrainingDivergenceError as exc:
        click.echo(f"training diverged: {exc}", err=True)
        return 3
    except (StateCorruptionError, NumericError) as exc:
        click.echo(f"invariant violation: {exc}", err=True)
        return 4
    except RollwinError as exc:
        click.echo(f"runtime failure: {exc}", err=True)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
