"""Forward/backward passes for the per-token transformer layers.

Everything is float64 numpy. Matrices follow the ``y = x @ W.T`` layout
(weights are ``[out, in]``). Attention works per head on ``[N, d]`` inputs
or batched over a leading head axis ``[H, N, d]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit


# ---------------------------------------------------------------------------
# RMSNorm
# ---------------------------------------------------------------------------

@dataclass
class RmsNormCache:
    rstd: np.ndarray  # one entry per row


def _check_last_dim(x, gamma):
    if gamma.ndim != 1 or x.shape[-1] != gamma.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape} vs gamma {gamma.shape}")


def rmsnorm_fwd(x, gamma, eps: float = 1e-6):
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    _check_last_dim(x, gamma)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    ms = np.mean(x * x, axis=-1)
    with np.errstate(divide="ignore"):
        rstd = 1.0 / np.sqrt(ms + eps)
    y = x * rstd[..., None] * gamma
    return y, RmsNormCache(rstd)


def rmsnorm_bwd(dy, x, gamma, cache: RmsNormCache | None):
    """Gradients of ``rmsnorm_fwd`` w.r.t. the input and the scale.

    dx_i = rstd * (gamma_i dy_i - xhat_i * mean_j(dy_j gamma_j xhat_j)),
    with xhat = x * rstd.
    """
    if cache is None:
        raise ValueError("missing cache: run rmsnorm_fwd first")
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    rstd = cache.rstd[..., None]
    xhat = x * rstd
    gdy = dy * gamma
    c1 = np.mean(gdy * xhat, axis=-1, keepdims=True)
    dx = rstd * (gdy - xhat * c1)
    dgamma = (dy * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dgamma


def rmsnorm_residual_fwd(x, residual, gamma, eps: float = 1e-6):
    """Add ``residual`` into ``x`` then normalise; returns (y, new_residual, cache)."""
    x = np.asarray(x, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if x.shape != residual.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {residual.shape}")
    h = x + residual
    y, cache = rmsnorm_fwd(h, gamma, eps)
    return y, h, cache


# ---------------------------------------------------------------------------
# SwiGLU
# ---------------------------------------------------------------------------

def _same_shape(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {a.shape}")


def swiglu_fwd(gate, up):
    gate = np.asarray(gate, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    _same_shape(gate, up)
    return gate * expit(gate) * up


def swiglu_bwd(dout, gate, up):
    dout = np.asarray(dout, dtype=np.float64)
    gate = np.asarray(gate, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    _same_shape(dout, gate, up)
    sig = expit(gate)
    dsilu = sig * (1.0 + gate * (1.0 - sig))
    return dout * up * dsilu, dout * gate * sig


# ---------------------------------------------------------------------------
# RoPE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RopeCache:
    cos: np.ndarray  # [max_len, head_dim // 2]
    sin: np.ndarray
    base: float = 10000.0

    @property
    def max_len(self) -> int:
        return self.cos.shape[0]

    @property
    def head_dim(self) -> int:
        return 2 * self.cos.shape[1]


def rope_frequencies(head_dim: int, base: float = 10000.0) -> np.ndarray:
    if head_dim % 2:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    i = np.arange(head_dim // 2, dtype=np.float64)
    return base ** (-2.0 * i / head_dim)


def rope_build_cache(max_len: int, head_dim: int, base: float = 10000.0) -> RopeCache:
    inv_freq = rope_frequencies(head_dim, base)
    angles = np.outer(np.arange(max_len, dtype=np.float64), inv_freq)
    return RopeCache(np.cos(angles), np.sin(angles), float(base))


def rope_apply(x, positions, cache: RopeCache, inverse: bool = False):
    """Rotate interleaved pairs (x[2i], x[2i+1]) of the last axis.

    ``x`` is ``[..., N, head_dim]`` and ``positions`` has length N.
    ``inverse=True`` applies the transpose rotation (used by backward).
    """
    x = np.asarray(x, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    if x.shape[-1] != cache.head_dim:
        raise ValueError(f"last dim {x.shape[-1]} != head_dim {cache.head_dim}")
    if positions.size and (positions.min() < 0 or positions.max() >= cache.max_len):
        raise IndexError("position out of range of the RoPE cache")
    cos = cache.cos[positions]
    sin = cache.sin[positions]
    if inverse:
        sin = -sin
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x1 * cos + x0 * sin
    return out


def rope_apply_qk(q, k, positions, cache: RopeCache):
    """Rotate queries and keys with one shared cos/sin lookup."""
    return rope_apply(q, positions, cache), rope_apply(k, positions, cache)


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Uniform [0, 1) draws that depend only on (seed, offset + i)."""
    with np.errstate(over="ignore"):
        key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
        idx = np.arange(offset, offset + n, dtype=np.uint64)
        bits = _splitmix64(idx * _GOLDEN ^ key)
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def dropout_mask(shape, p: float, seed: int, offset: int = 0) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    n = int(np.prod(shape))
    return (counter_uniform(seed, n, offset) >= p).reshape(shape)


def dropout_fwd(x, p: float, seed: int, offset: int = 0):
    x = np.asarray(x, dtype=np.float64)
    if p == 0.0:
        return x.copy()
    keep = dropout_mask(x.shape, p, seed, offset)
    return np.where(keep, x / (1.0 - p), 0.0)


def dropout_bwd(dy, p: float, seed: int, offset: int = 0):
    # the mask is regenerated, never stored
    return dropout_fwd(dy, p, seed, offset)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int = 1
    head_dim: int = 2
    causal: bool = False
    block_q: int = 64
    block_kv: int = 64

    def __post_init__(self):
        if self.block_q < 1 or self.block_kv < 1:
            raise ValueError("block sizes must be >= 1")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError("head_dim must be even and >= 2")


def _attention_inputs(q, k, v):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim not in (2, 3) or k.shape != q.shape or v.shape[:-1] != q.shape[:-1]:
        raise ValueError(f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    return q, k, v


def attention_mask(q_idx, k_idx, causal: bool, segment_ids=None) -> np.ndarray:
    """Boolean ``[len(q_idx), len(k_idx)]`` mask of allowed (query, key) pairs."""
    allowed = np.ones((len(q_idx), len(k_idx)), dtype=bool)
    if causal:
        allowed &= k_idx[None, :] <= q_idx[:, None]
    if segment_ids is not None:
        allowed &= segment_ids[q_idx][:, None] == segment_ids[k_idx][None, :]
    return allowed


def attention_probs(q, k, causal: bool = False, segment_ids=None):
    """Materialised softmax(QK^T/sqrt(d)) with masking; fully-masked rows are 0."""
    n = q.shape[-2]
    idx = np.arange(n)
    allowed = attention_mask(idx, idx, causal, segment_ids)
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    s = np.where(allowed, s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    p = np.exp(s - m)
    denom = p.sum(axis=-1, keepdims=True)
    degenerate = denom[..., 0] == 0.0
    p = p / np.where(denom == 0.0, 1.0, denom)
    return p, degenerate


def attention_naive(q, k, v, config: AttentionConfig | None = None, *,
                    segment_ids=None, return_flags: bool = False):
    """Reference attention that builds the full score matrix."""
    q, k, v = _attention_inputs(q, k, v)
    causal = bool(config and config.causal)
    p, degenerate = attention_probs(q, k, causal, segment_ids)
    out = p @ v
    return (out, degenerate) if return_flags else out


def attention_tiled(q, k, v, config: AttentionConfig | None = None, *,
                    segment_ids=None, return_flags: bool = False):
    """Block-tiled attention with running max / sum rescaling.

    Only ``[block_q, block_kv]`` score tiles exist at any time. The last tile
    along either axis may be shorter when the block size does not divide N.
    """
    q, k, v = _attention_inputs(q, k, v)
    config = config or AttentionConfig(head_dim=max(2, q.shape[-1] + q.shape[-1] % 2))
    n, d = q.shape[-2], q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    lead = q.shape[:-2]
    out = np.zeros(lead + (n, v.shape[-1]))
    degenerate = np.zeros(lead + (n,), dtype=bool)
    bq, bkv = config.block_q, config.block_kv

    for qs in range(0, n, bq):
        qe = min(qs + bq, n)
        q_idx = np.arange(qs, qe)
        qi = q[..., qs:qe, :]
        o = np.zeros(lead + (qe - qs, v.shape[-1]))
        m = np.full(lead + (qe - qs,), -np.inf)
        ell = np.zeros(lead + (qe - qs,))
        for ks in range(0, n, bkv):
            if config.causal and ks > qe - 1:
                break
            ke = min(ks + bkv, n)
            k_idx = np.arange(ks, ke)
            allowed = attention_mask(q_idx, k_idx, config.causal, segment_ids)
            if not allowed.any():
                continue
            s = qi @ np.swapaxes(k[..., ks:ke, :], -1, -2) * scale
            s = np.where(allowed, s, -np.inf)
            m_tile = s.max(axis=-1)
            m_tile_safe = np.where(np.isfinite(m_tile), m_tile, 0.0)
            p = np.exp(s - m_tile_safe[..., None])
            ell_tile = p.sum(axis=-1)
            m_new = np.maximum(m, m_tile)
            m_new_safe = np.where(np.isfinite(m_new), m_new, 0.0)
            alpha = np.where(np.isfinite(m), np.exp(m - m_new_safe), 0.0)
            beta = np.where(np.isfinite(m_tile), np.exp(m_tile_safe - m_new_safe), 0.0)
            ell = alpha * ell + beta * ell_tile
            o = alpha[..., None] * o + beta[..., None] * (p @ v[..., ks:ke, :])
            m = m_new
        empty = ell == 0.0
        degenerate[..., qs:qe] = empty
        out[..., qs:qe, :] = o / np.where(empty, 1.0, ell)[..., None]
    return (out, degenerate) if return_flags else out


def attention_bwd(dout, q, k, v, causal: bool = False, segment_ids=None):
    """Gradients of masked softmax attention, recomputing the probabilities."""
    q, k, v = _attention_inputs(q, k, v)
    p, _ = attention_probs(q, k, causal, segment_ids)
    scale = 1.0 / math.sqrt(q.shape[-1])
    dv = np.swapaxes(p, -1, -2) @ dout
    dp = dout @ np.swapaxes(v, -1, -2)
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    dq = ds @ k * scale
    dk = np.swapaxes(ds, -1, -2) @ q * scale
    return dq, dk, dv
