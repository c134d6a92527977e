"""Denoiser forward/backward: identities, equivalences, and gradient fidelity."""

import numpy as np
import pytest

from rollwin.denoiser import (
    DenoiserParams,
    ModelConfig,
    backward,
    build_anchors,
    encode_clean_block,
    forward_core,
    forward_window,
    full_sequence_denoise,
    init_params,
    params_from_checkpoint,
    timestep_features,
)
from rollwin.errors import ConfigError
from rollwin.io import read_checkpoint, write_checkpoint
from rollwin.kvcache import CacheEntry, LayerCache, TemporalCache
from rollwin.linalg import RngState, normal_matrix, pack, rope_rows, unpack

SMALL = ModelConfig(
    n_layers=2, latent_dim=8, head_dim=8, ff_dim=12, time_feat_dim=8, cond_dim=3
)


def small_setup(seed=11, n_blocks=3, B=2, with_cache=True):
    params = init_params(SMALL, seed)
    injector = SMALL.make_injector()
    rng = RngState(seed + 1)
    frames, rng = normal_matrix(rng, n_blocks * B, SMALL.latent_dim)
    conds, rng = normal_matrix(rng, n_blocks * B, SMALL.cond_dim)
    reference, rng = normal_matrix(rng, B, SMALL.latent_dim)
    anchors = build_anchors(params, reference, injector, offset_d=-1)
    contexts = []
    start_frame = 2 * B
    for a in anchors:
        cache = TemporalCache(budget_tokens=2 * B if with_cache else 0)
        if with_cache:
            for bi in (0, 1):
                k, rng = normal_matrix(rng, B, SMALL.head_dim)
                v, rng = normal_matrix(rng, B, SMALL.head_dim)
                cache.push(
                    CacheEntry(
                        block_index=bi,
                        positions=np.arange(bi * B, bi * B + B, dtype=np.int64),
                        keys=k,
                        values=v,
                    )
                )
        contexts.append(LayerCache(anchor=a, temporal=cache))
    times = np.array([0.25, 0.5, 0.75])
    return params, injector, frames, conds, contexts, times, start_frame, B


class TestTimestepFeatures:
    def test_zero_time_pattern(self):
        e = timestep_features(0.0, 8)
        np.testing.assert_array_equal(e, [1, 1, 1, 1, 0, 0, 0, 0])

    def test_injective_on_schedule_grid(self):
        grid = np.linspace(0, 1, 33)
        feats = [timestep_features(float(t), 16) for t in grid]
        for i in range(len(grid)):
            for j in range(i + 1, len(grid)):
                assert np.abs(feats[i] - feats[j]).max() > 1e-9

    def test_lipschitz_on_unit_interval(self):
        ts = np.linspace(0, 1, 1000)
        feats = np.stack([timestep_features(float(t), 16) for t in ts])
        steps = np.linalg.norm(np.diff(feats, axis=0), axis=1)
        omega = 2.0 ** np.arange(8)
        bound = np.linalg.norm(omega) * (ts[1] - ts[0])
        assert steps.max() <= bound * 1.0001

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            timestep_features(-0.1, 8)
        with pytest.raises(ValueError):
            timestep_features(1.5, 8)


class TestForward:
    def test_zero_params_is_identity(self):
        params = init_params(SMALL, 0)
        for name, t in params.named_tensors():
            if not name.endswith(("ln1_g", "ln2_g", "ln_f_g")):
                params.set_tensor(name, np.zeros_like(t))
        frames, _ = normal_matrix(RngState(5), 6, SMALL.latent_dim)
        res = forward_core(
            params,
            frames,
            times=np.full(6, 0.5),
            positions=np.arange(6, dtype=np.int64),
            conds=np.zeros((6, SMALL.cond_dim)),
            injector=SMALL.make_injector(),
        )
        np.testing.assert_array_equal(res.x0_hat, frames)

    def test_deterministic(self):
        params, injector, frames, conds, contexts, times, start, B = small_setup()
        a, _ = forward_window(params, frames, times, B, start, conds, injector, contexts)
        b, _ = forward_window(params, frames, times, B, start, conds, injector, contexts)
        np.testing.assert_array_equal(a.x0_tokens, b.x0_tokens)

    def test_context_geometry_reported(self):
        params, injector, frames, conds, contexts, times, start, B = small_setup()
        _, res = forward_window(params, frames, times, B, start, conds, injector, contexts)
        assert res.u_i == 0
        assert res.context_rows == 2 + 4 + 6  # anchor + cached + window

    def test_block_split(self):
        params, injector, frames, conds, contexts, times, start, B = small_setup()
        pred, _ = forward_window(params, frames, times, B, start, conds, injector, contexts)
        np.testing.assert_array_equal(pred.block(1), pred.x0_tokens[2:4])
        assert len(pred.blocks()) == 3

    def test_shape_validation(self):
        params, injector, frames, conds, contexts, times, start, B = small_setup()
        with pytest.raises(ValueError):
            forward_window(params, frames, times[:2], B, start, conds, injector, contexts)
        with pytest.raises(ValueError):
            forward_core(
                params, frames, np.full(6, 0.5), np.arange(6, dtype=np.int64),
                conds[:, :2], injector, contexts,
            )

    def test_bad_model_config(self):
        with pytest.raises(ConfigError):
            ModelConfig(head_dim=7)
        with pytest.raises(ConfigError):
            ModelConfig(time_feat_dim=3)


class TestFullSequenceEquivalence:
    def test_degenerate_window_match(self):
        cfg = ModelConfig()
        params = init_params(cfg, 3)
        injector = cfg.make_injector()
        rng = RngState(9)
        L, B = 4, 4
        frames, rng = normal_matrix(rng, L * B, cfg.latent_dim)
        conds, rng = normal_matrix(rng, L * B, cfg.cond_dim)
        reference, _ = normal_matrix(rng, B, cfg.latent_dim)
        anchors = build_anchors(params, reference, injector, offset_d=-1)
        t = 0.6
        full = full_sequence_denoise(params, frames, t, conds, injector, anchors=anchors)
        contexts = [LayerCache(anchor=a, temporal=TemporalCache(0)) for a in anchors]
        windowed, _ = forward_window(
            params, frames, np.full(L, t), B, 0, conds, injector, contexts
        )
        assert np.abs(full.x0_hat - windowed.x0_tokens).max() <= 1e-5

    def test_global_position_shift_invariance(self):
        cfg = ModelConfig()
        params = init_params(cfg, 4)
        injector = cfg.make_injector()
        rng = RngState(10)
        frames, rng = normal_matrix(rng, 12, cfg.latent_dim)
        conds, rng = normal_matrix(rng, 12, cfg.cond_dim)
        reference, _ = normal_matrix(rng, 4, cfg.latent_dim)
        anchors = build_anchors(params, reference, injector, offset_d=-1)
        base = full_sequence_denoise(
            params, frames, 0.4, conds, injector, anchors=anchors, start_position=0
        )
        shifted = full_sequence_denoise(
            params, frames, 0.4, conds, injector, anchors=anchors, start_position=37
        )
        assert np.abs(base.x0_hat - shifted.x0_hat).max() < 1e-10

    def test_anchor_conditioning_content_ignored_by_default(self):
        cfg = ModelConfig()
        params = init_params(cfg, 5)
        injector = cfg.make_injector()
        reference, rng = normal_matrix(RngState(11), 4, cfg.latent_dim)
        stale, _ = normal_matrix(rng, 1, cfg.cond_dim)
        a = build_anchors(params, reference, injector, offset_d=-1)
        b = build_anchors(params, reference, injector, offset_d=-1)
        for la, lb in zip(a, b):
            np.testing.assert_array_equal(la.pre_rope_keys, lb.pre_rope_keys)
        c = build_anchors(params, reference, injector, offset_d=-1, cond_features=stale)
        assert any(
            np.abs(x.pre_rope_keys - y.pre_rope_keys).max() > 0 for x, y in zip(a, c)
        )


class TestCleanBlockEncoding:
    def test_rotated_keys_match_positions(self):
        params, injector, frames, conds, contexts, times, start, B = small_setup()
        block = frames[:B]
        positions = np.arange(start, start + B, dtype=np.int64)
        kv = encode_clean_block(
            params, block, positions, conds[:B], injector, contexts
        )
        res = forward_core(
            params, block, np.zeros(B), positions, conds[:B], injector, contexts,
            want_kv=True,
        )
        for (k_rot, v), (k_pre, k_rot2, v2) in zip(kv, res.layer_kv):
            np.testing.assert_array_equal(k_rot, k_rot2)
            np.testing.assert_array_equal(v, v2)
            np.testing.assert_allclose(
                k_rot,
                rope_rows(k_pre, positions.astype(np.float64), SMALL.rope),
                atol=1e-12,
            )


class TestGradients:
    def test_regression_loss_gradient_matches_finite_differences(self):
        params, injector, frames, conds, contexts, times, start, B = small_setup()
        target, _ = normal_matrix(RngState(77), frames.shape[0], SMALL.latent_dim)
        names = [n for n, _ in params.named_tensors()]
        templates = [t for _, t in params.named_tensors()]

        def loss_of(vec):
            trial = params.copy()
            for name, arr in zip(names, unpack(vec, templates)):
                trial.set_tensor(name, arr.copy())
            pred, _ = forward_window(
                trial, frames, times, B, start, conds, injector, contexts
            )
            diff = pred.x0_tokens - target
            return float((diff * diff).mean())

        pred, res = forward_window(
            params, frames, times, B, start, conds, injector, contexts, want_tape=True
        )
        d_x0 = 2.0 * (pred.x0_tokens - target) / pred.x0_tokens.size
        grads = backward(params, res.tape, d_x0)

        base = pack(templates)
        fd_all = np.empty_like(base)
        eps = 1e-5
        for j in range(base.size):
            hi = base.copy(); hi[j] += eps
            lo = base.copy(); lo[j] -= eps
            fd_all[j] = (loss_of(hi) - loss_of(lo)) / (2 * eps)
        fd_parts = unpack(fd_all, templates)

        worst = 0.0
        for name, fd in zip(names, fd_parts):
            a = grads[name]
            denom = max(1e-6, np.abs(fd).max(), np.abs(a).max())
            worst = max(worst, np.abs(a - fd).max() / denom)
        assert worst < 1e-4, f"worst relative gradient error {worst}"

    def test_gradient_zero_for_unused_injection_layer(self):
        cfg = ModelConfig(
            n_layers=2, latent_dim=8, head_dim=8, ff_dim=12, time_feat_dim=8,
            cond_dim=3, injection_layers=(0,),
        )
        params = init_params(cfg, 2)
        injector = cfg.make_injector()
        frames, rng = normal_matrix(RngState(21), 4, 8)
        conds, _ = normal_matrix(rng, 4, 3)
        res = forward_core(
            params, frames, np.full(4, 0.3), np.arange(4, dtype=np.int64),
            conds, injector, want_tape=True,
        )
        grads = backward(params, res.tape, np.ones_like(res.x0_hat))
        assert set(grads) == {n for n, _ in params.named_tensors()}


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params(SMALL, 123)
        frames, _ = normal_matrix(RngState(1), 4, SMALL.latent_dim)
        path = tmp_path / "model.ckpt"
        write_checkpoint(path, SMALL.to_text(123), params.named_tensors())
        text, tensors = read_checkpoint(path)
        loaded = params_from_checkpoint(text, tensors)
        for (n1, t1), (n2, t2) in zip(params.named_tensors(), loaded.named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(t1, t2)
        assert loaded.cfg == SMALL

        path2 = tmp_path / "model2.ckpt"
        write_checkpoint(path2, loaded.cfg.to_text(loaded.param_seed), loaded.named_tensors())
        assert path.read_bytes() == path2.read_bytes()

    def test_missing_tensor_rejected(self, tmp_path):
        params = init_params(SMALL, 1)
        tensors = params.named_tensors()[:-1]
        path = tmp_path / "broken.ckpt"
        write_checkpoint(path, SMALL.to_text(1), tensors)
        text, loaded = read_checkpoint(path)
        with pytest.raises(ValueError):
            params_from_checkpoint(text, loaded)
