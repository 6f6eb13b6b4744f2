"""Cross-entropy over a large vocabulary without materialising the logits.

``cce_fwd`` streams the LM-head weight in chunks of ``chunk_size`` rows and
keeps a per-row online (max, sum) state, so the only vocabulary-sized storage
is a single ``rows x chunk_size`` scratch buffer. ``ce_naive`` is the
full-logit oracle used to check it.
"""
from __future__ import annotations

import tracemalloc
from dataclasses import dataclass

import numpy as np

IGNORE_INDEX = -100


@dataclass(frozen=True)
class CceConfig:
    chunk_size: int = 4096
    label_smoothing: float = 0.0
    z_weight: float = 0.0
    ignore_index: int = IGNORE_INDEX
    dtype: type = np.float64  # np.float32 enables Kahan-compensated d-sums

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.z_weight < 0:
            raise ValueError("z_weight must be >= 0")


@dataclass
class CceResult:
    loss: np.ndarray          # per row, 0 for ignored rows
    lse: np.ndarray           # per row
    target_logit: np.ndarray  # per row, 0 for ignored rows
    valid: np.ndarray         # bool mask of supervised rows

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def mean_loss(self) -> float:
        n = self.n_valid
        return float(self.loss.sum() / n) if n else 0.0


def _check_targets(targets, vocab: int, ignore_index: int):
    targets = np.asarray(targets, dtype=np.int64)
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise ValueError(f"target out of range [0, {vocab}): {targets[bad][:5].tolist()}")
    return targets, valid


def _combine(lse, target_logit, mean_logit, valid, cfg: CceConfig):
    eps = cfg.label_smoothing
    loss = lse - target_logit
    if eps:
        loss = (1.0 - eps) * loss + eps * (lse - mean_logit)
    if cfg.z_weight:
        loss = loss + cfg.z_weight * lse * lse
    return np.where(valid, loss, 0.0)


def ce_naive(logits, targets, cfg: CceConfig | None = None) -> CceResult:
    """Reference cross-entropy on a fully materialised ``[rows, V]`` logit matrix."""
    cfg = cfg or CceConfig()
    logits = np.asarray(logits, dtype=np.float64)
    rows, vocab = logits.shape
    targets, valid = _check_targets(targets, vocab, cfg.ignore_index)
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    safe_t = np.where(valid, targets, 0)
    zt = np.where(valid, logits[np.arange(rows), safe_t], 0.0)
    loss = _combine(lse, zt, logits.mean(axis=1), valid, cfg)
    return CceResult(loss, lse, zt, valid)


def ce_naive_grad(logits, targets, cfg: CceConfig | None = None) -> np.ndarray:
    """d(mean loss)/d(logits) for ``ce_naive``."""
    cfg = cfg or CceConfig()
    res = ce_naive(logits, targets, cfg)
    logits = np.asarray(logits, dtype=np.float64)
    p = np.exp(logits - res.lse[:, None])
    g = _row_grad(p, logits.shape[1], res, np.asarray(targets), 0, cfg)
    return g


def _row_grad(p, vocab, res: CceResult, targets, start, cfg: CceConfig):
    """Gradient of the mean loss w.r.t. one chunk of logits (in place on ``p``)."""
    eps, lam = cfg.label_smoothing, cfg.z_weight
    if lam:
        p *= (1.0 + 2.0 * lam * res.lse)[:, None]
    if eps:
        p -= eps / vocab
    local = targets - start
    hit = res.valid & (local >= 0) & (local < p.shape[1])
    rows = np.nonzero(hit)[0]
    p[rows, local[rows]] -= 1.0 - eps
    n = res.n_valid
    scale = np.where(res.valid, 1.0 / n if n else 0.0, 0.0)
    p *= scale[:, None]
    return p


def cce_fwd(hidden, lm_weight, targets, cfg: CceConfig | None = None) -> CceResult:
    """Chunked fused-linear cross-entropy.

    logits = hidden @ lm_weight.T is computed ``chunk_size`` vocabulary rows at
    a time into one reusable scratch buffer.
    """
    cfg = cfg or CceConfig()
    dt = cfg.dtype
    hidden = np.asarray(hidden, dtype=dt)
    lm_weight = np.asarray(lm_weight, dtype=dt)
    rows, h = hidden.shape
    vocab, h2 = lm_weight.shape
    if h != h2:
        raise ValueError(f"hidden size mismatch: {h} vs {h2}")
    targets, valid = _check_targets(targets, vocab, cfg.ignore_index)
    c = min(cfg.chunk_size, vocab)
    compensate = dt != np.float64

    buf = np.empty(rows * c, dtype=dt)
    m = np.full(rows, -np.inf, dtype=dt)
    d = np.zeros(rows, dtype=dt)
    comp = np.zeros(rows, dtype=dt)  # Kahan compensation for d in 32-bit mode
    zsum = np.zeros(rows, dtype=dt)
    zt = np.zeros(rows, dtype=dt)
    ridx = np.arange(rows)

    for s in range(0, vocab, c):
        e = min(s + c, vocab)
        z = buf[: rows * (e - s)].reshape(rows, e - s)
        np.matmul(hidden, lm_weight[s:e].T, out=z)
        local = targets - s
        hit = valid & (local >= 0) & (local < e - s)
        zt[hit] = z[ridx[hit], local[hit]]
        if cfg.label_smoothing:
            zsum += z.sum(axis=1)
        mc = z.max(axis=1)
        z -= mc[:, None]
        np.exp(z, out=z)
        dc = z.sum(axis=1)
        m_new = np.maximum(m, mc)
        scaled_old = d * np.exp(m - m_new)
        if compensate:
            comp *= np.exp(m - m_new)
            y = dc * np.exp(mc - m_new) - comp
            t = scaled_old + y
            comp = (t - scaled_old) - y
            d = t
        else:
            d = scaled_old + dc * np.exp(mc - m_new)
        m = m_new

    lse = (m + np.log(d)).astype(np.float64)
    zt = zt.astype(np.float64)
    loss = _combine(lse, zt, zsum.astype(np.float64) / vocab, valid, cfg)
    return CceResult(loss, lse, zt, valid)


def cce_bwd(hidden, lm_weight, targets, result: CceResult | None,
            cfg: CceConfig | None = None):
    """Gradients of ``result.mean_loss`` w.r.t. hidden and lm_weight.

    Logits are recomputed chunk by chunk from the saved per-row lse.
    """
    if result is None:
        raise ValueError("missing result: run cce_fwd first")
    cfg = cfg or CceConfig()
    hidden = np.asarray(hidden, dtype=np.float64)
    lm_weight = np.asarray(lm_weight, dtype=np.float64)
    rows = hidden.shape[0]
    vocab = lm_weight.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    c = min(cfg.chunk_size, vocab)
    dh = np.zeros_like(hidden)
    dw = np.zeros_like(lm_weight)
    buf = np.empty(rows * c)
    for s in range(0, vocab, c):
        e = min(s + c, vocab)
        p = buf[: rows * (e - s)].reshape(rows, e - s)
        np.matmul(hidden, lm_weight[s:e].T, out=p)
        p -= result.lse[:, None]
        np.exp(p, out=p)
        g = _row_grad(p, vocab, result, targets, s, cfg)
        dh += g @ lm_weight[s:e]
        dw[s:e] = g.T @ hidden
    return dh, dw


def select_chunk_size(vocab: int, sram_budget_bytes: float | None = None, rows: int = 1) -> int:
    """Vocabulary chunk size: size tier by vocabulary, bounded by budget and V."""
    if vocab < 1:
        raise ValueError("vocab must be >= 1")
    if vocab < 65536:
        tier = 4096
    elif vocab < 131072:
        tier = 8192
    else:
        tier = 16384
    if sram_budget_bytes is not None:
        fit = max(1, int(sram_budget_bytes // (max(rows, 1) * 4)))
        if tier > fit:
            return min(fit, vocab)
    return min(tier, vocab)


def reduction_factor(vocab: int, chunk: int) -> float:
    return vocab / chunk


def peak_allocation(fn, *args, **kwargs):
    """Run ``fn`` and return (result, peak bytes allocated during the call)."""
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    try:
        out = fn(*args, **kwargs)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return out, peak - base
