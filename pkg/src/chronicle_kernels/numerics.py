"""Streaming log-sum-exp, stable softmax and compensated summation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NEG_INF = float("-inf")


@dataclass(frozen=True)
class OnlineSoftmaxState:
    m: float = NEG_INF
    d: float = 0.0

    @property
    def lse(self) -> float:
        if self.d == 0.0:
            return NEG_INF
        return math.log(self.d) + self.m


def online_update(state: OnlineSoftmaxState, x: float) -> OnlineSoftmaxState:
    """Fold one element into the running (max, shifted-sum) pair."""
    if not math.isfinite(x):
        raise ValueError("online_update expects a finite value")
    m_new = max(state.m, x)
    # exp(-inf - m_new) is taken as 0 for the empty state
    scale = 0.0 if state.m == NEG_INF else math.exp(state.m - m_new)
    return OnlineSoftmaxState(m_new, state.d * scale + math.exp(x - m_new))


def online_merge(a: OnlineSoftmaxState, b: OnlineSoftmaxState) -> OnlineSoftmaxState:
    """Combine two partial states (e.g. two vocabulary chunks)."""
    if a.m == NEG_INF:
        return b
    if b.m == NEG_INF:
        return a
    m = max(a.m, b.m)
    return OnlineSoftmaxState(m, a.d * math.exp(a.m - m) + b.d * math.exp(b.m - m))


def online_lse(values) -> float:
    state = OnlineSoftmaxState()
    for x in values:
        state = online_update(state, float(x))
    if state.d == 0.0:
        raise ValueError("empty reduction")
    return state.lse


def logsumexp(z) -> float:
    """log(sum(exp(z))) for a 1-D row, computed with a max shift."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("empty reduction")
    m = z.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.exp(z - m).sum()))


def stable_softmax(z, return_flag: bool = False):
    """Softmax of a row, shifted by its max.

    A row whose entries are all -inf (fully masked) yields the uniform
    distribution instead of NaN; pass ``return_flag=True`` to also get a
    ``degenerate`` boolean.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty reduction")
    m = z.max()
    if m == NEG_INF:
        out = np.full(z.shape, 1.0 / z.size)
        return (out, True) if return_flag else out
    e = np.exp(z - m)
    out = e / e.sum()
    return (out, False) if return_flag else out


@dataclass(frozen=True)
class KahanAccumulator:
    sum: float = 0.0
    c: float = 0.0
    dtype: type = np.float64


def kahan_add(acc: KahanAccumulator, x: float) -> KahanAccumulator:
    """One compensated addition, rounded at the accumulator's storage precision."""
    t_ = acc.dtype
    s = t_(acc.sum)
    y = t_(x) - t_(acc.c)
    t = t_(s + y)
    c = t_(t_(t - s) - y)
    return KahanAccumulator(t, c, acc.dtype)


def kahan_sum(values, dtype=np.float64) -> float:
    """Compensated sum of ``values``; every intermediate is rounded to ``dtype``."""
    s = dtype(0.0)
    c = dtype(0.0)
    for x in values:
        y = dtype(x) - c
        t = s + y
        c = (t - s) - y
        s = t
    return s


def naive_sum(values, dtype=np.float64) -> float:
    s = dtype(0.0)
    for x in values:
        s = s + dtype(x)
    return s
