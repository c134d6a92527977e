"""Conditioning encoder causality, window alignment, and additive injection."""

import numpy as np
import pytest

from rollwin.conditioning import (
    CondEncoder,
    CondInjector,
    align_to_window,
    anchor_cond,
)
from rollwin.errors import LookaheadUnderrunError
from rollwin.linalg import RngState, normal, normal_matrix
from rollwin.schedule import Block, StreamConfig, Window


def make_window(first_index, L=4, B=4, dim=16):
    blocks = []
    for k in range(L):
        frames, s = normal_matrix(RngState(50 + first_index + k), B, dim)
        noise, _ = normal_matrix(s, B, dim)
        blocks.append(Block(first_index + k, k + 1, frames, noise))
    return Window(tuple(blocks))


class TestEncoder:
    def test_zero_signal_gives_zero_features(self):
        enc = CondEncoder()
        feats = enc.encode_stream(np.zeros(10))
        np.testing.assert_array_equal(feats, np.zeros((10, 4)))

    def test_bit_identical_re_encoding(self):
        enc = CondEncoder()
        raw, _ = normal(RngState(3), 50)
        np.testing.assert_array_equal(enc.encode_stream(raw), enc.encode_stream(raw))

    def test_two_encoders_share_weights(self):
        np.testing.assert_array_equal(CondEncoder().weights, CondEncoder().weights)

    def test_causal_locality(self):
        enc = CondEncoder()
        raw, _ = normal(RngState(4), 200)
        raw2 = raw.copy()
        raw2[100] += 1.0
        a = enc.encode_stream(raw)
        b = enc.encode_stream(raw2)
        differs = np.where(np.abs(a - b).max(axis=1) > 0)[0]
        np.testing.assert_array_equal(differs, [100, 101, 102])

    def test_no_future_leakage(self):
        enc = CondEncoder()
        raw, _ = normal(RngState(5), 30)
        full = enc.encode_stream(raw)
        frame = enc.encode_frame(raw, 10)
        np.testing.assert_array_equal(frame.features, full[10])

    def test_padding_at_stream_start(self):
        enc = CondEncoder()
        raw = np.array([1.0, 2.0, 3.0, 4.0])
        feats = enc.encode_stream(raw)
        np.testing.assert_allclose(feats[0], np.array([0.0, 0.0, 1.0]) @ enc.weights, atol=0)
        np.testing.assert_allclose(feats[2], np.array([1.0, 2.0, 3.0]) @ enc.weights, atol=0)


class TestAnchorCond:
    def test_zero_features(self):
        np.testing.assert_array_equal(anchor_cond(4).features, np.zeros(4))

    def test_zero_injection_contribution(self):
        inj = CondInjector(cond_dim=4, latent_dim=16, injection_layers={0})
        tokens, _ = normal_matrix(RngState(6), 4, 16)
        conds = np.tile(anchor_cond(4).features, (4, 1))
        np.testing.assert_array_equal(inj.inject(tokens, conds, 0), tokens)


class TestAlign:
    def test_rows_match_window_frames(self):
        cfg = StreamConfig()
        window = make_window(10)
        features, _ = normal_matrix(RngState(7), 80, 4)
        rows = align_to_window(features, window, cfg)
        assert rows.shape == (16, 4)
        np.testing.assert_array_equal(rows, features[40:56])

    def test_single_block_window_needs_no_lookahead(self):
        cfg = StreamConfig(L=1)
        window = Window((make_window(3, L=1).blocks[0],))
        features, _ = normal_matrix(RngState(8), 16, 4)
        rows = align_to_window(features, window, cfg)
        assert rows.shape == (4, 4)

    def test_underrun_raises(self):
        cfg = StreamConfig()
        window = make_window(10)
        features, _ = normal_matrix(RngState(9), 55, 4)
        with pytest.raises(LookaheadUnderrunError):
            align_to_window(features, window, cfg)

    def test_lookahead_horizon_arithmetic(self):
        cfg = StreamConfig(L=4, B=4, fps=25.0)
        assert cfg.lookahead_frames == 12
        assert cfg.lookahead_seconds == pytest.approx(0.48, abs=0)


class TestInjector:
    def test_zero_conds_identity(self):
        inj = CondInjector(cond_dim=4, latent_dim=16, injection_layers={0, 1})
        tokens, _ = normal_matrix(RngState(10), 8, 16)
        out = inj.inject(tokens, np.zeros((8, 4)), 1)
        np.testing.assert_array_equal(out, tokens)

    def test_non_injection_layer_identity(self):
        inj = CondInjector(cond_dim=4, latent_dim=16, injection_layers={0})
        tokens, s = normal_matrix(RngState(11), 8, 16)
        conds, _ = normal_matrix(s, 8, 4)
        assert inj.inject(tokens, conds, 3) is tokens

    def test_additive_linearity(self):
        inj = CondInjector(cond_dim=4, latent_dim=16, injection_layers={0})
        tokens, s = normal_matrix(RngState(12), 8, 16)
        a, s = normal_matrix(s, 8, 4)
        b, _ = normal_matrix(s, 8, 4)
        joint = inj.inject(tokens, a + b, 0)
        chained = inj.inject(inj.inject(tokens, a, 0), b, 0)
        np.testing.assert_allclose(joint, chained, atol=1e-12)

    def test_frame_synchronous_not_pooled(self):
        inj = CondInjector(cond_dim=4, latent_dim=16, injection_layers={0})
        tokens = np.zeros((4, 16))
        conds, _ = normal_matrix(RngState(13), 4, 4)
        out = inj.inject(tokens, conds, 0)
        permuted = inj.inject(tokens, conds[::-1].copy(), 0)
        assert np.abs(out - permuted).max() > 0

    def test_row_mismatch_rejected(self):
        inj = CondInjector(cond_dim=4, latent_dim=16, injection_layers={0})
        with pytest.raises(ValueError):
            inj.inject(np.zeros((4, 16)), np.zeros((3, 4)), 0)
