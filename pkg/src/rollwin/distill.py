"""Desk-scale two-stage one-step distillation lab.

Pipeline: synthetic conditioned clips -> multi-step full-sequence teacher ->
offline deterministic-denoising-path backfill -> stage 1 (one-step regression
onto backfilled endpoints) -> stage 2 (distribution-matching post-training with
a trainable critic on rolling-window student rollouts).

Context construction (style anchors, temporal caches) is gradient-stopped
everywhere: training losses differentiate only through the window forward pass,
matching the streaming-time role of cached keys/values as constants.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .conditioning import CondEncoder
from .denoiser import (
    DenoiserParams,
    ModelConfig,
    backward,
    build_anchors,
    encode_clean_block,
    forward_window,
    full_sequence_denoise,
    init_params,
    zero_grads,
)
from .errors import ConfigError, NumericError, TrainingDivergenceError
from .kvcache import CacheEntry, LayerCache, TemporalCache
from .linalg import RngState, fold_seed, normal_matrix, uniform
from .schedule import StreamConfig, build_schedule
from .streamer import init_stream, run, step

_LIFT_SEED = 0x11F7_BA51


# ---------------------------------------------------------------------------
# Synthetic conditioned stream task


@dataclass(frozen=True)
class ClipData:
    clip_id: int
    frames: np.ndarray          # F x latent_dim clean latents
    raw_cond: np.ndarray        # F scalar driving signal
    cond_features: np.ndarray   # F x cond_dim encoded conditioning
    phases: np.ndarray          # F underlying phase track


@dataclass(frozen=True)
class SyntheticDataset:
    clips: tuple
    seed: int
    lift: np.ndarray            # 3 x latent_dim orthonormal rows
    omega_base: float
    cond_gain: float
    noise_floor: float
    rho: float
    identity_drift: float
    encoder: CondEncoder


def lift_basis(latent_dim: int) -> np.ndarray:
    """Fixed orthonormal 3-row embedding of (cos phase, sin phase, identity)."""
    raw, _ = normal_matrix(RngState(fold_seed(_LIFT_SEED, latent_dim)), latent_dim, 3)
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))
    basis = q.T
    basis.setflags(write=False)
    return basis


def synthesize_clip(raw_cond, phi0, psi0, lift, omega_base, cond_gain,
                    identity_drift, noise):
    """Pure latent synthesis: cond drives phase velocity, identity drifts slowly."""
    raw_cond = np.asarray(raw_cond, dtype=np.float64).reshape(-1)
    n = raw_cond.shape[0]
    phases = np.empty(n)
    phases[0] = phi0
    for j in range(n - 1):
        phases[j + 1] = phases[j] + omega_base + cond_gain * raw_cond[j]
    identity = psi0 + identity_drift * np.arange(n)
    channels = np.stack([np.cos(phases), np.sin(phases), identity], axis=1)
    frames = channels @ lift + noise
    return frames, phases


def gen_dataset(n_clips, frames_per_clip, seed, latent_dim=16, cond_dim=4,
                omega_base=1.0, cond_gain=1.5, noise_floor=0.02, rho=0.9,
                identity_drift=0.001) -> SyntheticDataset:
    """Deterministic synthetic clip corpus; the cond stream causally drives phase."""
    if n_clips <= 0 or frames_per_clip <= 0:
        raise ConfigError("n_clips and frames_per_clip must be positive")
    lift = lift_basis(latent_dim)
    encoder = CondEncoder(cond_dim=cond_dim)
    clips = []
    for i in range(n_clips):
        rng = RngState(fold_seed(seed, "clip", i))
        eps, rng = normal_matrix(rng, frames_per_clip, 1)
        raw = np.empty(frames_per_clip)
        raw[0] = eps[0, 0]
        scale = np.sqrt(1.0 - rho * rho)
        for j in range(frames_per_clip - 1):
            raw[j + 1] = rho * raw[j] + scale * eps[j + 1, 0]
        u, rng = uniform(rng, 1)
        phi0 = 2.0 * np.pi * u[0]
        psi, rng = normal_matrix(rng, 1, 1)
        floor, rng = normal_matrix(rng, frames_per_clip, latent_dim)
        frames, phases = synthesize_clip(
            raw, phi0, psi[0, 0], lift, omega_base, cond_gain, identity_drift,
            noise_floor * floor,
        )
        clips.append(
            ClipData(
                clip_id=i,
                frames=frames,
                raw_cond=raw,
                cond_features=encoder.encode_stream(raw),
                phases=phases,
            )
        )
    return SyntheticDataset(
        clips=tuple(clips), seed=seed, lift=lift, omega_base=omega_base,
        cond_gain=cond_gain, noise_floor=noise_floor, rho=rho,
        identity_drift=identity_drift, encoder=encoder,
    )


def noised(frames, t, noise):
    """Linear interpolation corruption at level t in [0, 1]."""
    return (1.0 - t) * frames + t * noise


# ---------------------------------------------------------------------------
# Training plumbing


@dataclass(frozen=True)
class LabConfig:
    """Desk-scale budgets and step sizes for the whole distillation pipeline."""

    n_clips: int = 24
    frames_per_clip: int = 32
    heldout_clips: int = 4
    teacher_steps: int = 2500
    teacher_lr: float = 0.05
    teacher_batch: int = 2
    n_pairs: int = 2000
    n_ode_steps: int = 16
    stage1_steps: int = 1200
    stage1_lr: float = 0.05
    stage1_batch: int = 2
    dmd_steps: int = 600
    dmd_lr: float = 0.0001
    critic_lr: float = 0.02
    critic_ratio: int = 5
    refresh_every: int = 25
    rollout_clips: int = 4
    backprop_blocks: int = 1
    dmd_weight: float = 1.0
    momentum: float = 0.9

    def train_ids(self):
        return list(range(self.n_clips - self.heldout_clips))

    def heldout_ids(self):
        return list(range(self.n_clips - self.heldout_clips, self.n_clips))


def lab_model_config(stream_cfg: StreamConfig, cond_dim=4) -> ModelConfig:
    return ModelConfig(
        n_layers=2, latent_dim=stream_cfg.latent_dim, head_dim=16, ff_dim=32,
        time_feat_dim=16, cond_dim=cond_dim,
    )


@dataclass
class SgdMomentum:
    lr: float
    momentum: float = 0.9
    velocities: dict = field(default_factory=dict)

    def apply(self, params: DenoiserParams, grads: dict) -> None:
        for name, tensor in params.named_tensors():
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocities.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocities[name] = v
            params.set_tensor(name, tensor - self.lr * v)


def grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def _accumulate(total: dict, part: dict, scale: float) -> None:
    for name, g in part.items():
        total[name] = total[name] + scale * g


def _choice(rng: RngState, n: int):
    u, rng = uniform(rng, 1)
    return min(int(u[0] * n), n - 1), rng


def _check_loss(loss, what, step_i):
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"{what} loss non-finite at step {step_i}")


def _lab_anchors(params, clip, cfg, injector):
    if not cfg.use_style_anchor:
        return [None] * params.cfg.n_layers
    return build_anchors(
        params, clip.frames[: cfg.anchor_tokens], injector,
        offset_d=cfg.anchor_offset_d,
    )


# ---------------------------------------------------------------------------
# Teacher


def train_teacher(model_cfg, dataset, steps, seed, lr=0.05, momentum=0.9,
                  batch=2, clip_ids=None, cfg=None):
    """Denoising regression over uniform corruption levels, full-sequence mode."""
    cfg = cfg if cfg is not None else StreamConfig(latent_dim=model_cfg.latent_dim)
    params = init_params(model_cfg, fold_seed(seed, "teacher-init"))
    injector = model_cfg.make_injector()
    opt = SgdMomentum(lr, momentum)
    rng = RngState(fold_seed(seed, "teacher"))
    ids = list(clip_ids) if clip_ids is not None else [c.clip_id for c in dataset.clips]
    curve = []
    for step_i in range(steps):
        grads = zero_grads(params)
        loss_acc = 0.0
        for _ in range(batch):
            pick, rng = _choice(rng, len(ids))
            clip = dataset.clips[ids[pick]]
            tdraw, rng = uniform(rng, 1)
            t = float(tdraw[0])
            noise, rng = normal_matrix(rng, *clip.frames.shape)
            x_t = noised(clip.frames, t, noise)
            anchors = _lab_anchors(params, clip, cfg, injector)
            res = full_sequence_denoise(
                params, x_t, t, clip.cond_features, injector, anchors=anchors,
                want_tape=True,
            )
            diff = res.x0_hat - clip.frames
            loss_acc += float((diff * diff).mean()) / batch
            part = backward(params, res.tape, 2.0 * diff / diff.size / batch)
            _accumulate(grads, part, 1.0)
        _check_loss(loss_acc, "teacher", step_i)
        opt.apply(params, grads)
        curve.append((step_i, loss_acc, grad_norm(grads)))
    return params, curve


def denoise_mse(params, clips, t, seed, cfg=None, injector=None):
    """Mean reconstruction error at one corruption level, fixed noise draws."""
    cfg = cfg if cfg is not None else StreamConfig(latent_dim=params.cfg.latent_dim)
    injector = injector if injector is not None else params.cfg.make_injector()
    total = 0.0
    for clip in clips:
        noise, _ = normal_matrix(
            RngState(fold_seed(seed, "eval", clip.clip_id)), *clip.frames.shape
        )
        anchors = _lab_anchors(params, clip, cfg, injector)
        res = full_sequence_denoise(
            params, noised(clip.frames, t, noise), t, clip.cond_features,
            injector, anchors=anchors,
        )
        diff = res.x0_hat - clip.frames
        total += float((diff * diff).mean())
    return total / len(clips)


# ---------------------------------------------------------------------------
# Offline deterministic-denoising backfill


@dataclass(frozen=True)
class TrajectoryPair:
    clip_id: int
    t: float
    x_t: np.ndarray
    x0_ode: np.ndarray
    cond: np.ndarray


def ode_denoise(params, x_t, t, conds, injector, anchors=None, start_position=0,
                n_steps=16, context: str = ""):
    """Deterministic probability-flow denoising from level t to 0, Euler steps.

    The velocity of the linear corruption path is (x_tau - x0_hat)/tau, so the
    final sub-step lands exactly on the model's clean prediction.
    """
    x = np.array(x_t, dtype=np.float64)
    if t <= 0.0:
        return x
    delta = t / n_steps
    for k in range(n_steps):
        tau = t - k * delta
        res = full_sequence_denoise(
            params, x, tau, conds, injector, anchors=anchors,
            start_position=start_position,
        )
        x = x - delta * (x - res.x0_hat) / tau
        if not np.all(np.isfinite(x)):
            raise NumericError(
                f"denoising path diverged at tau={tau:.4f}{context}"
            )
    return x


def ode_backfill(teacher, dataset, n_pairs, n_ode_steps, seed, stage_times=None,
                 clip_ids=None, cfg=None, injector=None):
    """Sample (clip, t), corrupt, and record the teacher's deterministic endpoint."""
    cfg = cfg if cfg is not None else StreamConfig(latent_dim=teacher.cfg.latent_dim)
    injector = injector if injector is not None else teacher.cfg.make_injector()
    ids = list(clip_ids) if clip_ids is not None else [c.clip_id for c in dataset.clips]
    anchor_cache = {
        i: _lab_anchors(teacher, dataset.clips[i], cfg, injector) for i in ids
    }
    pairs = []
    for i in range(n_pairs):
        rng = RngState(fold_seed(seed, "pair", i))
        pick, rng = _choice(rng, len(ids))
        clip = dataset.clips[ids[pick]]
        if stage_times is not None:
            si, rng = _choice(rng, len(stage_times))
            t = float(stage_times[si])
        else:
            u, rng = uniform(rng, 1)
            t = float(1.0 - u[0])  # uniform in (0, 1]
        noise, rng = normal_matrix(rng, *clip.frames.shape)
        x_t = noised(clip.frames, t, noise)
        x0 = ode_denoise(
            teacher, x_t, t, clip.cond_features, injector,
            anchors=anchor_cache[clip.clip_id], n_steps=n_ode_steps,
            context=f" (clip {clip.clip_id}, t={t:.4f})",
        )
        pairs.append(
            TrajectoryPair(
                clip_id=clip.clip_id, t=t, x_t=x_t, x0_ode=x0,
                cond=clip.cond_features,
            )
        )
    return pairs


def pairs_to_records(pairs):
    return [(p.clip_id, p.t, p.x_t, p.x0_ode, p.cond) for p in pairs]


def pairs_from_records(records):
    return [
        TrajectoryPair(clip_id=c, t=t, x_t=x, x0_ode=x0, cond=cond)
        for c, t, x, x0, cond in records
    ]


# ---------------------------------------------------------------------------
# Stage 1: one-step regression onto backfilled endpoints


def teacher_forced_caches(params, clip, cfg, injector, window_start,
                          anchors=None):
    """Rebuild the temporal cache a stream would hold at window_start.

    Clean data blocks immediately before the window are encoded in stream
    order (each with the cache built so far), up to the token budget.  The
    chain starts empty, so deep history beyond the budget is dropped exactly
    as streaming eviction would drop it.
    """
    if anchors is None:
        anchors = _lab_anchors(params, clip, cfg, injector)
    caches = [
        LayerCache(anchor=a, temporal=TemporalCache(cfg.cache_budget_tokens))
        for a in anchors
    ]
    n_hist = min(cfg.cache_budget_tokens // cfg.B, window_start // cfg.B)
    first = window_start // cfg.B - n_hist
    for bi in range(first, window_start // cfg.B):
        lo, hi = bi * cfg.B, (bi + 1) * cfg.B
        positions = np.arange(lo, hi, dtype=np.int64)
        kv = encode_clean_block(
            params, clip.frames[lo:hi], positions, clip.cond_features[lo:hi],
            injector, caches, reindex=cfg.rope_reindex,
        )
        for cache, (k_rot, v) in zip(caches, kv):
            cache.temporal.push(
                CacheEntry(block_index=bi, positions=positions, keys=k_rot, values=v)
            )
    return caches


def stage1_example_loss(student, pair, clip, cfg, window_start, injector,
                        caches=None, want_grads=True):
    """One regression example: window slice of a pair at its single noise level."""
    W = cfg.window_frames
    if caches is None:
        caches = teacher_forced_caches(student, clip, cfg, injector, window_start)
    frames = pair.x_t[window_start : window_start + W]
    conds = pair.cond[window_start : window_start + W]
    times = np.full(cfg.L, pair.t)
    pred, res = forward_window(
        student, frames, times, cfg.B, window_start, conds, injector, caches,
        reindex=cfg.rope_reindex, want_tape=want_grads,
    )
    diff = pred.x0_tokens - pair.x0_ode[window_start : window_start + W]
    loss = float((diff * diff).mean())
    if not want_grads:
        return loss, None
    return loss, backward(student, res.tape, 2.0 * diff / diff.size)


def _window_starts(cfg, n_frames):
    last = n_frames - cfg.window_frames
    return list(range(0, last + 1, cfg.B))


def ode_regress(student, pairs, dataset, cfg, steps, seed, lr=0.05,
                momentum=0.9, batch=2, injector=None):
    """One-step predictor regression onto backfilled endpoints, window slices."""
    if not pairs:
        raise ConfigError("ode_regress needs a nonempty pair set")
    student = student.copy()
    injector = injector if injector is not None else student.cfg.make_injector()
    opt = SgdMomentum(lr, momentum)
    rng = RngState(fold_seed(seed, "stage1"))
    curve = []
    for step_i in range(steps):
        grads = zero_grads(student)
        loss_acc = 0.0
        for _ in range(batch):
            pick, rng = _choice(rng, len(pairs))
            pair = pairs[pick]
            clip = dataset.clips[pair.clip_id]
            starts = _window_starts(cfg, clip.frames.shape[0])
            wi, rng = _choice(rng, len(starts))
            loss, part = stage1_example_loss(
                student, pair, clip, cfg, starts[wi], injector
            )
            loss_acc += loss / batch
            _accumulate(grads, part, 1.0 / batch)
        _check_loss(loss_acc, "stage-1", step_i)
        opt.apply(student, grads)
        curve.append((step_i, loss_acc, grad_norm(grads)))
    return student, curve


def eval_regression(student, pairs, dataset, cfg, seed, n_samples=64,
                    injector=None):
    """Mean window-regression loss over sampled (pair, window start) draws."""
    injector = injector if injector is not None else student.cfg.make_injector()
    rng = RngState(fold_seed(seed, "regress-eval"))
    total = 0.0
    for _ in range(n_samples):
        pick, rng = _choice(rng, len(pairs))
        pair = pairs[pick]
        clip = dataset.clips[pair.clip_id]
        starts = _window_starts(cfg, clip.frames.shape[0])
        wi, rng = _choice(rng, len(starts))
        loss, _ = stage1_example_loss(
            student, pair, clip, cfg, starts[wi], injector, want_grads=False
        )
        total += loss
    return total / n_samples


# ---------------------------------------------------------------------------
# Stage 2: distribution matching on rolling-window rollouts


@dataclass(frozen=True)
class RolloutWindow:
    """Snapshot of a live stream window right before a denoising step."""

    clip_id: int
    frames: np.ndarray        # L*B x latent, heterogeneous noise levels
    block_times: np.ndarray   # per-block noise level, increasing left to right
    start_frame: int
    conds: np.ndarray
    caches: list              # per-layer LayerCache snapshot


def rollout_simulate(student, cfg, dataset, clip_ids, seed, injector=None):
    """Stream training clips with the current student and harvest window snapshots.

    Windows are captured at step entry once the window is full, so each snapshot
    carries the stage multiset {1..L} and the caches the stream held at that
    moment.  The denoising pass recomputed from a snapshot reproduces the
    stream's first pass of that step exactly.
    """
    injector = injector if injector is not None else student.cfg.make_injector()
    sched = build_schedule(cfg)
    windows = []
    for clip_id in clip_ids:
        clip = dataset.clips[clip_id]
        st = init_stream(
            cfg, student, clip.frames[: cfg.anchor_tokens],
            fold_seed(seed, "rollout", clip_id), injector=injector,
        )
        feats = clip.cond_features
        while (st.step_i + 1) * cfg.B <= feats.shape[0]:
            if len(st.blocks) == cfg.L:
                start = st.blocks[0].block_index * cfg.B
                windows.append(
                    RolloutWindow(
                        clip_id=clip_id,
                        frames=np.concatenate([b.frames for b in st.blocks]),
                        block_times=np.array(
                            [sched.time_of(b.stage) for b in st.blocks]
                        ),
                        start_frame=start,
                        conds=feats[start : start + cfg.window_frames].copy(),
                        caches=[
                            LayerCache(
                                anchor=c.anchor,
                                temporal=TemporalCache(
                                    c.temporal.budget_tokens,
                                    list(c.temporal.entries),
                                ),
                            )
                            for c in st.caches
                        ],
                    )
                )
            step(st, feats)
    return windows


def dmd_objective(x0_hat, g):
    """Distribution-matching loss given the estimated score-difference direction.

    loss = 0.5 * || x0_hat - stopgrad(x0_hat - g) ||^2, whose gradient w.r.t.
    x0_hat is exactly g because the target inside stopgrad is frozen.
    """
    sg_target = x0_hat - g
    diff = x0_hat - sg_target
    return 0.5 * float((diff * diff).sum()), sg_target


def dmd_loss(x0_hat, t, noise, conds, start_frame, teacher, teacher_anchors,
             critic, critic_anchors, injector, weight=1.0, mask_rows=None):
    """Score-difference update direction and its surrogate loss.

    Both the frozen teacher and the trainable critic are evaluated in
    clean-prediction form on the same corrupted sample; their difference
    (optionally weighted and masked to the backprop subset) is the generator
    gradient.
    """
    if not 0.0 < t <= 1.0:
        raise ConfigError(f"distribution-matching level t={t} outside (0, 1]")
    x_t = noised(x0_hat, t, noise)
    teach = full_sequence_denoise(
        teacher, x_t, t, conds, injector, anchors=teacher_anchors,
        start_position=start_frame,
    )
    crit = full_sequence_denoise(
        critic, x_t, t, conds, injector, anchors=critic_anchors,
        start_position=start_frame,
    )
    g = weight * (crit.x0_hat - teach.x0_hat)
    if not np.all(np.isfinite(g)):
        raise NumericError("score-difference direction non-finite")
    if mask_rows is not None:
        masked = np.zeros_like(g)
        masked[:mask_rows] = g[:mask_rows]
        g = masked
    loss, sg_target = dmd_objective(x0_hat, g)
    return loss, g, sg_target


def critic_update(critic, opt, samples, steps, rng, cfg, dataset, injector):
    """Denoising regression moving the critic toward the student's sample law.

    samples: list of (RolloutWindow, x0_hat), current student outputs treated
    as constants.  Mutates critic in place; returns (rng, losses).
    """
    losses = []
    for k in range(steps):
        pick, rng = _choice(rng, len(samples))
        window, x0_hat = samples[pick]
        clip = dataset.clips[window.clip_id]
        tdraw, rng = uniform(rng, 1)
        t_c = 1.0 - float(tdraw[0])  # uniform in (0, 1]
        noise, rng = normal_matrix(rng, *x0_hat.shape)
        x_tc = noised(x0_hat, t_c, noise)
        anchors = _lab_anchors(critic, clip, cfg, injector)
        res = full_sequence_denoise(
            critic, x_tc, t_c, window.conds, injector, anchors=anchors,
            start_position=window.start_frame, want_tape=True,
        )
        diff = res.x0_hat - x0_hat
        loss = float((diff * diff).mean())
        _check_loss(loss, "critic", k)
        grads = backward(critic, res.tape, 2.0 * diff / diff.size)
        opt.apply(critic, grads)
        losses.append(loss)
    return rng, losses


def distill_dmd(student, teacher, dataset, cfg, lab: LabConfig, seed,
                injector=None):
    """Alternating generator/critic post-training on rolling-window rollouts."""
    student = student.copy()
    critic = teacher.copy()
    injector = injector if injector is not None else student.cfg.make_injector()
    g_opt = SgdMomentum(lab.dmd_lr, lab.momentum)
    c_opt = SgdMomentum(lab.critic_lr, lab.momentum)
    rng = RngState(fold_seed(seed, "dmd"))
    stage_times = build_schedule(cfg).stage_times[1:]
    train_ids = lab.train_ids()
    teacher_anchors = {
        i: _lab_anchors(teacher, dataset.clips[i], cfg, injector)
        for i in train_ids
    }
    mask_rows = lab.backprop_blocks * cfg.B
    curve = []
    buffer = []
    for gs in range(lab.dmd_steps):
        if gs % lab.refresh_every == 0:
            first = (gs // lab.refresh_every) * lab.rollout_clips
            ids = [train_ids[(first + j) % len(train_ids)]
                   for j in range(lab.rollout_clips)]
            buffer = rollout_simulate(
                student, cfg, dataset, ids, fold_seed(seed, "buffer", gs),
                injector=injector,
            )
        pick, rng = _choice(rng, len(buffer))
        window = buffer[pick]
        pred, res = forward_window(
            student, window.frames, window.block_times, cfg.B,
            window.start_frame, window.conds, injector, window.caches,
            reindex=cfg.rope_reindex, want_tape=True,
        )
        x0_hat = pred.x0_tokens
        si, rng = _choice(rng, len(stage_times))
        t = float(stage_times[si])
        noise, rng = normal_matrix(rng, *x0_hat.shape)
        loss, g, _ = dmd_loss(
            x0_hat, t, noise, window.conds, window.start_frame,
            teacher, teacher_anchors[window.clip_id],
            critic, _lab_anchors(critic, dataset.clips[window.clip_id], cfg, injector),
            injector, weight=lab.dmd_weight, mask_rows=mask_rows,
        )
        _check_loss(loss, "distribution-matching", gs)
        grads = backward(student, res.tape, g)
        g_opt.apply(student, grads)
        rng, _ = critic_update(
            critic, c_opt, [(window, x0_hat)], lab.critic_ratio, rng, cfg,
            dataset, injector,
        )
        curve.append((gs, loss, grad_norm(grads)))
    return student, critic, curve


# ---------------------------------------------------------------------------
# Generation and evaluation


def teacher_generate(teacher, clip, cfg, n_frames, n_ode_steps, seed,
                     injector=None):
    """Multi-step full-sequence generation from pure noise, conditioned on the clip."""
    injector = injector if injector is not None else teacher.cfg.make_injector()
    noise, _ = normal_matrix(
        RngState(fold_seed(seed, "teachgen", clip.clip_id)),
        n_frames, teacher.cfg.latent_dim,
    )
    anchors = _lab_anchors(teacher, clip, cfg, injector)
    return ode_denoise(
        teacher, noise, 1.0, clip.cond_features[:n_frames], injector,
        anchors=anchors, n_steps=n_ode_steps,
        context=f" (generation, clip {clip.clip_id})",
    )


def student_generate(student, clip, cfg, n_frames, seed, injector=None):
    """One-step rolling-window streaming generation on the clip's cond stream."""
    frames, _, _ = run(
        cfg, student, clip.frames[: cfg.anchor_tokens], clip.cond_features,
        n_frames, fold_seed(seed, "studgen", clip.clip_id), injector=injector,
    )
    return frames


def energy_distance(x, y):
    """Nonnegative distance between two frame samples; 0 iff same distribution."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def cross(a, b):
        d = a[:, None, :] - b[None, :, :]
        return np.sqrt((d * d).sum(axis=2))

    exy = cross(x, y).mean()
    exx = cross(x, x).mean()
    eyy = cross(y, y).mean()
    return float(2.0 * exy - exx - eyy)
