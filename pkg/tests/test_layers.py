"""RMSNorm, SwiGLU, RoPE, dropout and attention against hand values and oracles."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronicle_kernels import layers
from chronicle_kernels.layers import (
    AttentionConfig,
    attention_bwd,
    attention_naive,
    attention_tiled,
    counter_uniform,
    dropout_bwd,
    dropout_fwd,
    rmsnorm_bwd,
    rmsnorm_fwd,
    rmsnorm_residual_fwd,
    rope_apply,
    rope_apply_qk,
    rope_build_cache,
    swiglu_bwd,
    swiglu_fwd,
)

from conftest import central_diff, rel_err


# ---------------------------------------------------------------------------
# RMSNorm
# ---------------------------------------------------------------------------

class TestRmsNorm:
    def test_hand_value(self):
        y, _ = rmsnorm_fwd(np.array([[3.0, 4.0]]), np.ones(2), eps=0.0)
        # [3, 4] / sqrt(12.5)
        np.testing.assert_allclose(y, [[0.848528137423857, 1.131370849898476]], atol=1e-12)

    def test_unit_rms_row_is_unchanged(self):
        x = np.array([[1.0, -1.0, 1.0, -1.0]])
        y, _ = rmsnorm_fwd(x, np.ones(4), eps=0.0)
        np.testing.assert_allclose(y, x, atol=1e-15)

    def test_zero_row_with_eps_is_finite(self):
        y, c = rmsnorm_fwd(np.zeros((1, 4)), np.ones(4), eps=1e-6)
        assert np.all(y == 0) and np.isfinite(c.rstd).all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            rmsnorm_fwd(np.ones((2, 4)), np.ones(3))

    def test_missing_cache(self):
        with pytest.raises(ValueError, match="missing cache"):
            rmsnorm_bwd(np.ones((1, 2)), np.ones((1, 2)), np.ones(2), None)

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_fd_with_nonuniform_gamma(self, seed):
        rng = np.random.default_rng(seed)
        x, g, dy = rng.normal(size=(4, 16)), rng.normal(1, 0.7, size=16), rng.normal(size=(4, 16))
        _, cache = rmsnorm_fwd(x, g)
        dx, dg = rmsnorm_bwd(dy, x, g, cache)
        f = lambda: float(np.sum(rmsnorm_fwd(x, g)[0] * dy))
        assert rel_err(dx, central_diff(f, x)) <= 1e-4
        assert rel_err(dg, central_diff(f, g)) <= 1e-4
        # far tighter than the criterion in practice
        assert rel_err(dx, central_diff(f, x)) <= 1e-8

    def test_residual_fusion(self, rng):
        x, r, g = rng.normal(size=(3, 8)), rng.normal(size=(3, 8)), rng.normal(size=8)
        y, h, _ = rmsnorm_residual_fwd(x, r, g)
        np.testing.assert_array_equal(h, x + r)
        np.testing.assert_array_equal(y, rmsnorm_fwd(x + r, g)[0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 100.0))
def test_rmsnorm_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x, g = rng.normal(size=(2, 8)), rng.normal(size=8)
    np.testing.assert_allclose(rmsnorm_fwd(c * x, g, 0.0)[0], rmsnorm_fwd(x, g, 0.0)[0],
                               rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# SwiGLU
# ---------------------------------------------------------------------------

class TestSwiGLU:
    def test_hand_value(self):
        # silu(1) * 2 = 2 / (1 + e^-1)
        assert swiglu_fwd(np.array([1.0]), np.array([2.0]))[0] == pytest.approx(1.4621171572600098, abs=1e-12)

    def test_zero_gate(self):
        assert swiglu_fwd(np.array([0.0]), np.array([5.0]))[0] == 0.0

    def test_extreme_gate_is_finite(self):
        out = swiglu_fwd(np.array([-1000.0, 1000.0]), np.array([1.0, 1.0]))
        np.testing.assert_allclose(out, [0.0, 1000.0])
        dg, du = swiglu_bwd(np.ones(2), np.array([-1000.0, 1000.0]), np.ones(2))
        assert np.isfinite(dg).all() and np.isfinite(du).all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            swiglu_fwd(np.ones(3), np.ones(4))

    def test_backward_matches_fd(self, rng):
        g, u, do = rng.normal(size=(3, 7)), rng.normal(size=(3, 7)), rng.normal(size=(3, 7))
        dg, du = swiglu_bwd(do, g, u)
        f = lambda: float(np.sum(swiglu_fwd(g, u) * do))
        assert rel_err(dg, central_diff(f, g)) <= 1e-4
        assert rel_err(du, central_diff(f, u)) <= 1e-4


# ---------------------------------------------------------------------------
# RoPE
# ---------------------------------------------------------------------------

class TestRope:
    def test_position_one_rotation(self):
        out = rope_apply(np.array([[1.0, 0.0, 1.0, 0.0]]), [1], rope_build_cache(4, 4))
        # pair 0 rotates by 1 rad, pair 1 by 1/100 rad
        np.testing.assert_allclose(out, [[math.cos(1), math.sin(1), math.cos(0.01), math.sin(0.01)]],
                                   atol=1e-15)

    def test_position_zero_is_identity(self, rng):
        x = rng.normal(size=(1, 8))
        np.testing.assert_array_equal(rope_apply(x, [0], rope_build_cache(4, 8)), x)

    def test_odd_head_dim(self):
        with pytest.raises(ValueError, match="even"):
            rope_build_cache(4, 7)

    def test_position_out_of_range(self):
        with pytest.raises(IndexError):
            rope_apply(np.ones((1, 4)), [9], rope_build_cache(4, 4))

    def test_inverse_undoes_rotation(self, rng):
        cache = rope_build_cache(64, 8)
        x, pos = rng.normal(size=(10, 8)), rng.integers(0, 64, size=10)
        np.testing.assert_allclose(rope_apply(rope_apply(x, pos, cache), pos, cache, inverse=True),
                                   x, atol=1e-13)

    def test_qk_uses_same_rotation(self, rng):
        cache = rope_build_cache(16, 4)
        q, k = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        rq, rk = rope_apply_qk(q, k, [0, 5, 9], cache)
        np.testing.assert_array_equal(rq, rope_apply(q, [0, 5, 9], cache))
        np.testing.assert_array_equal(rk, rope_apply(k, [0, 5, 9], cache))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 127), st.integers(0, 127))
def test_rope_norm_and_relative_position(seed, m, n):
    cache = rope_build_cache(256, 8)
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    qm, kn = rope_apply(q, [m], cache), rope_apply(k, [n], cache)
    assert abs(np.linalg.norm(qm) - np.linalg.norm(q)) <= 1e-12
    # <R_m q, R_n k> == <q, R_{n-m} k> (shift both by the same offset)
    shifted = rope_apply(q, [m + 100], cache) @ rope_apply(k, [n + 100], cache).T
    a, b = float((qm @ kn.T)[0, 0]), float(shifted[0, 0])
    assert abs(a - b) <= 1e-10 * max(1.0, abs(b))


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

_M64 = (1 << 64) - 1


def _splitmix64_py(z):
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def _uniform_py(seed, i):
    key = _splitmix64_py(seed & _M64)
    bits = _splitmix64_py(((i * 0x9E3779B97F4A7C15) & _M64) ^ key)
    return (bits >> 11) * 2.0 ** -53


class TestDropout:
    def test_counter_matches_integer_reference(self):
        got = counter_uniform(42, 5, offset=10)
        expect = [_uniform_py(42, 10 + i) for i in range(5)]
        assert got.tolist() == expect

    def test_frozen_draws(self):
        np.testing.assert_allclose(counter_uniform(0, 2), [0.6524484915, 0.4905064644], atol=1e-10)

    def test_offset_is_a_window(self):
        full = counter_uniform(3, 100)
        np.testing.assert_array_equal(counter_uniform(3, 40, offset=60), full[60:])

    def test_deterministic_and_rate(self):
        x = np.ones(200_000)
        a = dropout_fwd(x, 0.1, seed=7)
        np.testing.assert_array_equal(a, dropout_fwd(x, 0.1, seed=7))
        assert abs(np.mean(a != 0) - 0.9) < 0.003
        assert abs(a.mean() - 1.0) < 0.01  # inverted scaling keeps the mean
        assert not np.array_equal(a, dropout_fwd(x, 0.1, seed=8))

    def test_kept_values_scaled(self):
        a = dropout_fwd(np.full(1000, 2.0), 0.2, seed=1)
        assert set(np.unique(a)) <= {0.0, 2.5}

    def test_backward_reuses_mask(self, rng):
        x, dy = rng.normal(size=500), rng.normal(size=500)
        y = dropout_fwd(x, 0.3, 11, offset=5)
        dx = dropout_bwd(dy, 0.3, 11, offset=5)
        np.testing.assert_array_equal(y == 0, dx == 0)
        np.testing.assert_allclose(dx, np.where(y == 0, 0, dy / 0.7))

    def test_p_zero_and_invalid(self):
        x = np.arange(4.0)
        np.testing.assert_array_equal(dropout_fwd(x, 0.0, 1), x)
        with pytest.raises(ValueError):
            dropout_fwd(x, 1.0, 1)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _random_case(rng, max_n=128):
    n = int(rng.integers(1, max_n + 1))
    d = int(rng.choice([2, 4, 8, 16]))
    cfg = AttentionConfig(1, d, bool(rng.integers(2)), int(rng.integers(1, 40)), int(rng.integers(1, 40)))
    q, k, v = (rng.normal(size=(n, d)) for _ in range(3))
    seg = np.sort(rng.integers(0, 4, size=n)) if rng.random() < 0.5 else None
    return q, k, v, cfg, seg


class TestAttention:
    def test_uniform_scores_average_values(self):
        q = k = np.zeros((3, 2))
        v = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
        np.testing.assert_allclose(attention_naive(q, k, v), np.tile(v.mean(0), (3, 1)))
        causal = attention_tiled(q, k, v, AttentionConfig(causal=True, block_q=1, block_kv=2))
        np.testing.assert_allclose(causal, [[1, 0], [0.5, 0.5], [1, 1]])

    def test_first_causal_row_copies_v0(self, rng):
        q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
        out = attention_tiled(q, k, v, AttentionConfig(head_dim=4, causal=True, block_q=2, block_kv=3))
        np.testing.assert_allclose(out[0], v[0], atol=1e-15)

    def test_200_random_configs(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(200):
            q, k, v, cfg, seg = _random_case(rng)
            a = attention_tiled(q, k, v, cfg, segment_ids=seg)
            b = attention_naive(q, k, v, cfg, segment_ids=seg)
            worst = max(worst, float(np.max(np.abs(a - b))))
        assert worst <= 1e-10

    def test_multi_head_batch(self, rng):
        q, k, v = (rng.normal(size=(3, 20, 4)) for _ in range(3))
        cfg = AttentionConfig(3, 4, True, 7, 6)
        np.testing.assert_allclose(attention_tiled(q, k, v, cfg), attention_naive(q, k, v, cfg), atol=1e-12)

    def test_large_scores_stay_finite(self, rng):
        q, k, v = rng.normal(size=(16, 4)) * 300, rng.normal(size=(16, 4)) * 300, rng.normal(size=(16, 4))
        cfg = AttentionConfig(head_dim=4, block_q=5, block_kv=3)
        out = attention_tiled(q, k, v, cfg)
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, attention_naive(q, k, v, cfg), atol=1e-10)

    def test_segments_block_cross_attention(self, rng):
        q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
        seg = np.array([0, 0, 0, 1, 1, 1])
        cfg = AttentionConfig(head_dim=4, causal=True, block_q=4, block_kv=4)
        out = attention_tiled(q, k, v, cfg, segment_ids=seg)
        second = attention_naive(q[3:], k[3:], v[3:], cfg)
        np.testing.assert_allclose(out[3:], second, atol=1e-12)

    def test_singleton_segments_return_values(self, rng):
        q, k, v = (rng.normal(size=(4, 2)) for _ in range(3))
        out, flags = attention_tiled(q, k, v, AttentionConfig(block_q=3, block_kv=3),
                                     segment_ids=np.arange(4), return_flags=True)
        assert not flags.any()
        np.testing.assert_allclose(out, v, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            attention_naive(np.ones((3, 2)), np.ones((4, 2)), np.ones((3, 2)))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            AttentionConfig(block_q=0)

    @pytest.mark.parametrize("causal", [False, True])
    def test_backward_matches_fd(self, rng, causal):
        q, k, v, do = (rng.normal(size=(7, 4)) for _ in range(4))
        seg = np.array([0, 0, 0, 1, 1, 1, 1])
        dq, dk, dv = attention_bwd(do, q, k, v, causal, seg)
        cfg = AttentionConfig(head_dim=4, causal=causal, block_q=3, block_kv=2)
        f = lambda: float(np.sum(attention_tiled(q, k, v, cfg, segment_ids=seg) * do))
        for analytic, x in ((dq, q), (dk, k), (dv, v)):
            assert rel_err(analytic, central_diff(f, x)) <= 1e-4


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_tiled_attention_property(seed):
    rng = np.random.default_rng(seed)
    q, k, v, cfg, seg = _random_case(rng, max_n=48)
    np.testing.assert_allclose(attention_tiled(q, k, v, cfg, segment_ids=seg),
                               attention_naive(q, k, v, cfg, segment_ids=seg), atol=1e-10, rtol=0)
