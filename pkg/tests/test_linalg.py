"""Numeric kernel checks against independently computed values."""

import math

import numpy as np
import pytest

from rollwin.errors import NumericError
from rollwin.linalg import (
    RngState,
    RopeConfig,
    attention,
    finite_diff_grad,
    fold_seed,
    layer_norm,
    normal,
    normal_matrix,
    rope_apply,
    rope_rows,
    silu,
    silu_grad,
    softmax_rows,
    uniform,
)


def direct_attention(q, k, v):
    """Three-loop reference evaluation, no vectorization shortcuts."""
    nq, d = q.shape
    nk = k.shape[0]
    out = np.zeros((nq, v.shape[1]))
    for i in range(nq):
        logits = [sum(q[i, a] * k[j, a] for a in range(d)) / math.sqrt(d) for j in range(nk)]
        m = max(logits)
        ws = [math.exp(l - m) for l in logits]
        z = sum(ws)
        for j in range(nk):
            out[i] += (ws[j] / z) * v[j]
    return out


class TestRope:
    def test_position_zero_is_identity(self):
        cfg = RopeConfig(head_dim=8)
        rng = np.random.default_rng(0)
        key = rng.standard_normal(8)
        assert np.array_equal(rope_apply(key, 0, cfg), key) or np.allclose(
            rope_apply(key, 0, cfg), key, atol=0
        )

    def test_first_pair_rotates_by_position(self):
        cfg = RopeConfig(head_dim=4)
        key = np.array([1.0, 0.0, 0.0, 0.0])
        for p in [-3, 1, 7]:
            got = rope_apply(key, p, cfg)
            assert got[0] == pytest.approx(math.cos(p), abs=1e-12)
            assert got[1] == pytest.approx(math.sin(p), abs=1e-12)
            assert got[2] == 0.0 and got[3] == 0.0

    def test_relative_position_property(self):
        cfg = RopeConfig(head_dim=16)
        rng = np.random.default_rng(7)
        for _ in range(100):
            q = rng.standard_normal(16)
            k = rng.standard_normal(16)
            a, b = rng.integers(-500, 500, size=2)
            c = int(rng.integers(-500, 500))
            base = rope_apply(q, int(a), cfg) @ rope_apply(k, int(b), cfg)
            shifted = rope_apply(q, int(a) + c, cfg) @ rope_apply(k, int(b) + c, cfg)
            assert shifted == pytest.approx(base, abs=1e-10)

    def test_norm_preserved_at_extreme_positions(self):
        cfg = RopeConfig(head_dim=16)
        rng = np.random.default_rng(3)
        key = rng.standard_normal(16)
        for p in [-(10**6), -12345, 0, 999, 10**6]:
            got = rope_apply(key, p, cfg)
            assert np.linalg.norm(got) == pytest.approx(np.linalg.norm(key), abs=1e-12)

    def test_inverse_is_negative_position(self):
        cfg = RopeConfig(head_dim=8)
        rng = np.random.default_rng(5)
        key = rng.standard_normal(8)
        back = rope_apply(rope_apply(key, 321, cfg), -321, cfg)
        np.testing.assert_allclose(back, key, atol=1e-12)

    def test_rows_match_single_vector_path(self):
        cfg = RopeConfig(head_dim=6)
        rng = np.random.default_rng(11)
        mat = rng.standard_normal((5, 6))
        pos = np.array([4, -2, 0, 100, 7])
        got = rope_rows(mat, pos, cfg)
        for i in range(5):
            np.testing.assert_array_equal(got[i], rope_apply(mat[i], int(pos[i]), cfg))

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            RopeConfig(head_dim=7)
        with pytest.raises(ValueError):
            RopeConfig(head_dim=8, base=1.0)

    def test_bad_shapes_rejected(self):
        cfg = RopeConfig(head_dim=8)
        with pytest.raises(ValueError):
            rope_apply(np.zeros(6), 0, cfg)
        with pytest.raises(ValueError):
            rope_rows(np.zeros((3, 8)), np.zeros(2), cfg)


class TestAttention:
    def test_matches_direct_evaluation(self):
        rng = np.random.default_rng(13)
        q = rng.standard_normal((3, 4))
        k = rng.standard_normal((5, 4))
        v = rng.standard_normal((5, 2))
        np.testing.assert_allclose(attention(q, k, v), direct_attention(q, k, v), atol=1e-12)

    def test_single_key_returns_its_value(self):
        q = np.array([[0.3, -1.0]])
        k = np.array([[5.0, 2.0]])
        v = np.array([[7.0, -3.0, 1.5]])
        np.testing.assert_allclose(attention(q, k, v), v, atol=1e-15)

    def test_two_identical_keys_average_values(self):
        q = np.array([[1.0, 2.0]])
        k = np.array([[0.5, -0.5], [0.5, -0.5]])
        v = np.array([[2.0], [6.0]])
        np.testing.assert_allclose(attention(q, k, v), [[4.0]], atol=1e-12)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(17)
        logits = rng.standard_normal((4, 9)) * 30.0
        w = softmax_rows(logits)
        np.testing.assert_allclose(w.sum(axis=1), np.ones(4), atol=1e-12)
        assert (w >= 0).all()

    def test_shape_mismatches_raise(self):
        with pytest.raises(ValueError):
            attention(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros((5, 2)))
        with pytest.raises(ValueError):
            attention(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros((4, 2)))


class TestElementwise:
    def test_layer_norm_rows_standardized(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((6, 16)) * 4 + 2
        out = layer_norm(x, np.ones(16), np.zeros(16))
        assert np.abs(out.mean(axis=1)).max() < 1e-12
        assert np.abs(out.std(axis=1) - 1.0).max() < 1e-5

    def test_silu_grad_matches_finite_diff(self):
        xs = np.linspace(-4, 4, 23)
        for x in xs:
            fd = (silu(np.array(x + 1e-6)) - silu(np.array(x - 1e-6))) / 2e-6
            assert silu_grad(np.array(x)) == pytest.approx(fd, abs=1e-7)


class TestFiniteDiff:
    def test_quadratic_gradient(self):
        a = np.array([1.0, -2.0, 0.5])

        def f(x):
            return float(np.sum(a * x * x))

        x0 = np.array([0.3, 1.1, -0.7])
        np.testing.assert_allclose(finite_diff_grad(f, x0, 1e-5), 2 * a * x0, atol=1e-8)

    def test_constant_function_zero_gradient(self):
        g = finite_diff_grad(lambda x: 3.25, np.ones((2, 3)), 1e-4)
        np.testing.assert_array_equal(g, np.zeros((2, 3)))

    def test_nonfinite_probe_raises(self):
        def f(x):
            return float("nan")

        with pytest.raises(NumericError):
            finite_diff_grad(f, np.ones(2), 1e-4)

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, np.ones(2), 0.0)


class TestRng:
    def test_batched_draws_bit_identical_to_split(self):
        s = RngState(seed=1234)
        whole, _ = normal(s, 10)
        first, s2 = normal(s, 3)
        rest, _ = normal(s2, 7)
        np.testing.assert_array_equal(whole, np.concatenate([first, rest]))

    def test_replay_is_bit_identical(self):
        s = RngState(seed=99, counter=17)
        a, _ = normal(s, 64)
        b, _ = normal(RngState(seed=99, counter=17), 64)
        np.testing.assert_array_equal(a, b)

    def test_uniform_range_and_determinism(self):
        s = RngState(seed=5)
        u, s2 = uniform(s, 1000)
        assert (u >= 0).all() and (u < 1).all()
        assert s2.counter == 1000
        u2, _ = uniform(RngState(seed=5), 1000)
        np.testing.assert_array_equal(u, u2)

    def test_seeds_give_distinct_streams(self):
        a, _ = normal(RngState(seed=1), 100)
        b, _ = normal(RngState(seed=2), 100)
        assert not np.array_equal(a, b)

    def test_normal_moments_roughly_standard(self):
        vals, _ = normal(RngState(seed=42), 200_000)
        assert abs(vals.mean()) < 0.01
        assert abs(vals.std() - 1.0) < 0.01
        assert np.isfinite(vals).all()

    def test_matrix_helper_matches_flat_draws(self):
        s = RngState(seed=7)
        flat, _ = normal(s, 12)
        mat, s2 = normal_matrix(s, 3, 4)
        np.testing.assert_array_equal(mat, flat.reshape(3, 4))
        assert s2.counter == 24

    def test_fold_seed_distinguishes_labels(self):
        assert fold_seed(1, 2, 3) != fold_seed(1, 3, 2)
        assert fold_seed(1, 2) != fold_seed(2, 1)
        assert fold_seed(10, 5) == fold_seed(10, 5)
