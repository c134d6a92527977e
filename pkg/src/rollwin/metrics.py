"""Stability metrics for streamed rollouts: drift, flicker, cond-sync recovery.

All functions are pure: the same inputs give bit-identical outputs.  "Total"
variants average over the whole rollout, "Last" over its trailing fraction
(default quarter), so slow degradation shows up as Last >> Total.
"""

from dataclasses import dataclass

import numpy as np

LAST_FRACTION = 0.25


@dataclass(frozen=True)
class MetricsRecord:
    drift_total: float
    drift_last: float
    flicker_total: float
    flicker_last: float
    sync_corr: float
    per_step_latency_ms: float

    def csv_cells(self):
        return [
            self.drift_total, self.drift_last, self.flicker_total,
            self.flicker_last, self.sync_corr, self.per_step_latency_ms,
        ]


def _cosine(a, b):
    na = float(np.sqrt((a * a).sum()))
    nb = float(np.sqrt((b * b).sum()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def _last_slice(values, last_fraction):
    n = len(values)
    k = max(1, int(np.ceil(n * last_fraction)))
    return values[n - k :]


def anchor_drift(frames, reference, block_frames, last_fraction=LAST_FRACTION):
    """Identity-retention analog: 1 - cosine(per-block mean latent, reference mean).

    Returns (total, last).  0 means every emitted block keeps the reference
    frame's mean latent direction; growth over the rollout is drift.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n_blocks = frames.shape[0] // block_frames
    if n_blocks == 0:
        return 0.0, 0.0
    ref_mean = np.asarray(reference, dtype=np.float64).mean(axis=0)
    per_block = [
        1.0 - _cosine(
            frames[b * block_frames : (b + 1) * block_frames].mean(axis=0), ref_mean
        )
        for b in range(n_blocks)
    ]
    return float(np.mean(per_block)), float(np.mean(_last_slice(per_block, last_fraction)))


def flicker(frames, last_fraction=LAST_FRACTION):
    """Temporal roughness analog: mean L2 distance between adjacent frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        return 0.0, 0.0
    diffs = np.sqrt(((frames[1:] - frames[:-1]) ** 2).sum(axis=1))
    return float(diffs.mean()), float(np.mean(_last_slice(diffs, last_fraction)))


def recovered_phase(frames, lift):
    """Project generated frames back onto the circular channels and read the angle."""
    frames = np.asarray(frames, dtype=np.float64)
    c = frames @ lift[0]
    s = frames @ lift[1]
    return np.arctan2(s, c)


def wrap_angle(delta):
    return np.mod(delta + np.pi, 2.0 * np.pi) - np.pi


def sync_corr(frames, raw_cond, lift):
    """Pearson correlation between the driving signal and recovered phase velocity.

    The generator's phase increments are omega + gain*cond, so a synchronized
    rollout reproduces the cond signal (up to affine scale) in its recovered
    angular velocity.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 3:
        return 0.0
    phases = recovered_phase(frames, lift)
    vel = wrap_angle(np.diff(phases))
    drive = np.asarray(raw_cond, dtype=np.float64).reshape(-1)[: vel.shape[0]]
    vel = vel[: drive.shape[0]]
    sv, sd = vel.std(), drive.std()
    if sv == 0.0 or sd == 0.0:
        return 0.0
    corr = float(np.corrcoef(vel, drive)[0, 1])
    return float(np.clip(corr, -1.0, 1.0))


def compute_metrics(frames, reference, raw_cond, lift, block_frames,
                    latency_report=None, last_fraction=LAST_FRACTION) -> MetricsRecord:
    d_total, d_last = anchor_drift(frames, reference, block_frames, last_fraction)
    f_total, f_last = flicker(frames, last_fraction)
    latency_ms = 0.0
    if latency_report is not None:
        latency_ms = latency_report.steady_state_per_frame_s * 1e3
    return MetricsRecord(
        drift_total=d_total,
        drift_last=d_last,
        flicker_total=f_total,
        flicker_last=f_last,
        sync_corr=sync_corr(frames, raw_cond, lift),
        per_step_latency_ms=latency_ms,
    )


def median_record(records) -> MetricsRecord:
    """Field-wise median aggregate of several metric records."""
    if not records:
        raise ValueError("median_record needs at least one record")
    fields = [
        "drift_total", "drift_last", "flicker_total", "flicker_last",
        "sync_corr", "per_step_latency_ms",
    ]
    vals = {f: float(np.median([getattr(r, f) for r in records])) for f in fields}
    return MetricsRecord(**vals)
