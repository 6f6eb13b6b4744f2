import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronicle_kernels.numerics import (
    KahanAccumulator,
    OnlineSoftmaxState,
    kahan_add,
    kahan_sum,
    logsumexp,
    naive_sum,
    online_lse,
    online_merge,
    online_update,
    stable_softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def mp_lse(values):
    """High-precision log-sum-exp used as an independent oracle."""
    with mpmath.workdps(50):
        return float(mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in values)))


class TestOnlineUpdate:
    def test_first_element(self):
        s = online_update(OnlineSoftmaxState(), 5.0)
        assert (s.m, s.d) == (5.0, 1.0)

    def test_repeated_max(self):
        s = online_update(OnlineSoftmaxState(5.0, 1.0), 5.0)
        assert (s.m, s.d) == (5.0, 2.0)

    @pytest.mark.parametrize("order", [[1, 2, 3], [3, 2, 1], [2, 3, 1]])
    def test_small_sequence_any_order(self, order):
        # frozen: log(e^1 + e^2 + e^3)
        assert online_lse(order) == pytest.approx(3.40760596444438, abs=1e-12)

    def test_empty_state_lse(self):
        assert OnlineSoftmaxState().lse == -math.inf

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            online_update(OnlineSoftmaxState(), math.inf)

    def test_merge_matches_sequential(self, rng):
        z = rng.normal(size=40)
        a = b = OnlineSoftmaxState()
        for x in z[:17]:
            a = online_update(a, x)
        for x in z[17:]:
            b = online_update(b, x)
        assert online_merge(a, b).lse == pytest.approx(mp_lse(z), abs=1e-12)
        assert online_merge(OnlineSoftmaxState(), b) is b


class TestLogsumexp:
    def test_two_zeros(self):
        assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("c,V", [(0.0, 1), (3.5, 97), (-700.0, 1000), (800.0, 10)])
    def test_constant_row(self, c, V):
        assert logsumexp([c] * V) == pytest.approx(c + math.log(V), rel=1e-15, abs=1e-12)

    def test_random_row_against_high_precision(self, rng):
        z = rng.normal(0, 3, size=1000)
        assert abs(logsumexp(z) - mp_lse(z)) <= 1e-12

    def test_empty(self):
        with pytest.raises(ValueError, match="empty reduction"):
            logsumexp([])
        with pytest.raises(ValueError, match="empty reduction"):
            online_lse([])

    def test_large_values_do_not_overflow(self):
        assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2))


class TestStableSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(stable_softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)

    def test_large_logit(self):
        p = stable_softmax([1000.0, 0.0])
        assert p[0] == 1.0 and 0 <= p[1] < 1e-300 and np.all(np.isfinite(p))

    def test_shift(self, rng):
        z = rng.normal(size=30)
        np.testing.assert_allclose(stable_softmax(z), stable_softmax(z + 17.3), atol=1e-12)

    def test_fully_masked_row(self):
        p, degenerate = stable_softmax([-math.inf] * 5, return_flag=True)
        assert degenerate
        np.testing.assert_allclose(p, 0.2)
        _, degenerate = stable_softmax([0.0, -math.inf], return_flag=True)
        assert not degenerate


# -- properties --------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=60), st.randoms(use_true_random=False))
def test_streaming_lse_permutation_invariant(values, rnd):
    values = values + [max(values)] * 2  # duplicate maxima
    oracle = mp_lse(values)
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert abs(online_lse(shuffled) - oracle) <= 1e-12 * max(1.0, abs(oracle))


def test_streaming_lse_thousand_random_rows():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        z = rng.normal(0, 4, size=rng.integers(1, 50))
        z = np.concatenate([z, np.repeat(z.max(), rng.integers(0, 3))])
        m = z.max()
        two_pass = m + math.log(math.fsum(math.exp(v - m) for v in z))
        worst = max(worst, abs(online_lse(rng.permutation(z)) - two_pass))
    assert worst <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=40), st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(values, c):
    np.testing.assert_allclose(stable_softmax(values), stable_softmax(np.array(values) + c),
                               atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=40))
def test_softmax_is_distribution(values):
    p = stable_softmax(values)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all((p >= 0) & (p <= 1))


# -- Kahan -------------------------------------------------------------------

class TestKahan:
    def test_single_add(self):
        acc = kahan_add(KahanAccumulator(), 1.0)
        assert (acc.sum, acc.c) == (1.0, 0.0)

    def test_add_matches_sum(self):
        acc = KahanAccumulator(dtype=np.float32)
        vals = [1.0] + [1e-8] * 1000
        for v in vals:
            acc = kahan_add(acc, v)
        assert acc.sum == kahan_sum(vals, np.float32)

    def test_float32_one_million_tiny_adds(self):
        seq = np.concatenate([[1.0], np.full(10**6, 1e-8)]).astype(np.float32)
        k = float(kahan_sum(seq, np.float32))
        n = float(naive_sum(seq, np.float32))
        oracle = math.fsum(seq.astype(np.float64))  # exact sum of the float32 inputs
        assert n == 1.0
        assert abs(k - 1.01) <= 1e-6
        assert abs(k - oracle) <= 10 * abs(n - oracle)

    def test_error_flat_in_n(self):
        errs = {}
        for n in (10**3, 10**4, 10**5, 10**6):
            seq = np.concatenate([[1.0], np.full(n, 1e-8)]).astype(np.float32)
            oracle = math.fsum(seq.astype(np.float64))
            errs[n] = abs(float(kahan_sum(seq, np.float32)) - oracle)
        eps32 = np.finfo(np.float32).eps
        # no growth with n: every error stays at the half-ulp-of-1 floor
        assert max(errs.values()) <= eps32
        assert errs[10**6] <= errs[10**3] + eps32

    def test_compensated_error_bound(self, rng):
        x = rng.normal(size=20000).astype(np.float32)
        oracle = math.fsum(x.astype(np.float64))
        eps32 = float(np.finfo(np.float32).eps)
        bound = 4 * eps32 * float(np.abs(x.astype(np.float64)).sum())
        assert abs(float(kahan_sum(x, np.float32)) - oracle) <= bound
