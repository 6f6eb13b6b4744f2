"""LoRA and DoRA linear adapters.

Weights use the ``[out, in]`` layout: ``W0`` is ``[d, k]``, ``A`` is ``[r, k]``
and ``B`` is ``[d, r]``, so the adapted layer computes
``y = x W0^T + scaling * (x A^T) B^T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class LoraAdapter:
    A: np.ndarray
    B: np.ndarray
    alpha: float

    def __post_init__(self):
        r, _ = self.A.shape
        if self.B.shape[1] != r:
            raise ValueError(f"rank mismatch: A {self.A.shape}, B {self.B.shape}")
        if r < 1:
            raise ValueError("rank must be >= 1")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, d: int, k: int, r: int, alpha: float | None = None, rng=None,
             sigma: float | None = None) -> "LoraAdapter":
        """A ~ N(0, sigma^2) with sigma = 1/sqrt(r) by default; B = 0."""
        if not 1 <= r <= min(d, k):
            raise ValueError(f"rank {r} must be in [1, min(d, k)={min(d, k)}]")
        rng = rng if rng is not None else np.random.default_rng(0)
        sigma = 1.0 / math.sqrt(r) if sigma is None else sigma
        alpha = float(r) if alpha is None else float(alpha)
        return cls(rng.normal(0.0, sigma, size=(r, k)), np.zeros((d, r)), alpha)

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)


def _check(x, W0, ad: LoraAdapter):
    d, k = W0.shape
    if x.shape[-1] != k or ad.A.shape[1] != k or ad.B.shape[0] != d:
        raise ValueError(f"shape mismatch: x {x.shape}, W0 {W0.shape}, "
                         f"A {ad.A.shape}, B {ad.B.shape}")


def lora_fwd(x, W0, adapter: LoraAdapter, fused: bool = False):
    x = np.asarray(x, dtype=np.float64)
    _check(x, W0, adapter)
    if fused:
        return lora_fwd_fused(x, W0, adapter)
    return x @ W0.T + adapter.scaling * ((x @ adapter.A.T) @ adapter.B.T)


def lora_fwd_fused(x, W0, adapter: LoraAdapter):
    """Single GEMM on concatenated operands: [x | s*xA^T] @ [W0 | B]^T."""
    x = np.asarray(x, dtype=np.float64)
    _check(x, W0, adapter)
    xa = adapter.scaling * (x @ adapter.A.T)
    return np.concatenate([x, xa], axis=-1) @ np.concatenate([W0, adapter.B], axis=1).T


def lora_bwd(dy, x, W0, adapter: LoraAdapter):
    """Return (dx, dA, dB). With B == 0 the A-gradient is exactly zero."""
    dy = np.asarray(dy, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check(x, W0, adapter)
    s = adapter.scaling
    u = x @ adapter.A.T              # [rows, r]
    dB = s * (dy.T @ u)              # [d, r]
    du = s * (dy @ adapter.B)        # [rows, r]
    dA = du.T @ x                    # [r, k]
    dx = dy @ W0 + du @ adapter.A
    return dx, dA, dB


# ---------------------------------------------------------------------------
# DoRA
# ---------------------------------------------------------------------------

@dataclass
class DoraAdapter:
    lora: LoraAdapter
    m: np.ndarray  # one magnitude per output unit (length d)

    @classmethod
    def from_base(cls, W0, lora: LoraAdapter) -> "DoraAdapter":
        """Magnitudes start at the per-output norms of W0 + scaling*BA."""
        return cls(lora, _unit_norms(W0 + lora.delta()))


def _unit_norms(V):
    n = np.linalg.norm(V, axis=1)
    if np.any(n == 0.0):
        raise ValueError("zero column norm in DoRA direction")
    return n


def dora_weight(W0, adapter: DoraAdapter):
    V = W0 + adapter.lora.delta()
    n = _unit_norms(V)
    return (adapter.m / n)[:, None] * V


def dora_fwd(x, W0, adapter: DoraAdapter):
    x = np.asarray(x, dtype=np.float64)
    _check(x, W0, adapter.lora)
    return x @ dora_weight(W0, adapter).T


def dora_bwd(dy, x, W0, adapter: DoraAdapter):
    """Return (dx, dA, dB, dm) for ``dora_fwd``."""
    dy = np.asarray(dy, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    lo = adapter.lora
    V = W0 + lo.delta()
    n = _unit_norms(V)
    Wp = (adapter.m / n)[:, None] * V
    dWp = dy.T @ x                               # [d, k]
    proj = np.sum(dWp * V, axis=1) / n           # <dW'_i, V_i / n_i>
    dm = proj
    dV = (adapter.m / n)[:, None] * (dWp - (proj / n)[:, None] * V)
    s = lo.scaling
    dB = s * (dV @ lo.A.T)
    dA = s * (lo.B.T @ dV)
    dx = dy @ Wp
    return dx, dA, dB, dm


# ---------------------------------------------------------------------------
# Synthetic LoRA / LoRA+ convergence task
# ---------------------------------------------------------------------------

def synthetic_lora_task(seed: int, ratio: float, lr: float = 1e-2, threshold: float = 0.1,
                        max_steps: int = 20000, d: int = 32, k: int = 32, r: int = 4,
                        n: int = 128) -> int:
    """Steps of plain SGD until the loss drops below ``threshold * initial``.

    A frozen base W0 must be adapted by a rank-r update towards a random
    rank-r target; A learns at ``lr`` and B at ``lr * ratio``. Returns
    ``max_steps`` if the threshold is never reached.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, k))
    W0 = rng.normal(size=(d, k)) / math.sqrt(k)
    ad = LoraAdapter(rng.normal(size=(r, k)) / math.sqrt(r), np.zeros((d, r)), float(r))
    Bs = rng.normal(size=(d, r)) / math.sqrt(r)
    As = rng.normal(size=(r, k)) / math.sqrt(r)
    target = Bs @ As
    target *= math.sqrt(d) / np.linalg.norm(target)
    y_star = x @ (W0 + target).T

    loss0 = None
    for step in range(1, max_steps + 1):
        resid = lora_fwd(x, W0, ad) - y_star
        loss = 0.5 * float(np.mean(np.sum(resid * resid, axis=1)))
        if loss0 is None:
            loss0 = loss
        if not math.isfinite(loss):
            return max_steps
        if loss <= threshold * loss0:
            return step
        _, dA, dB = lora_bwd(resid / n, x, W0, ad)
        ad.A -= lr * dA
        ad.B -= lr * ratio * dB
    return max_steps
