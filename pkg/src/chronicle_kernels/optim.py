"""Optimizer steps: fused AdamW, 8-bit block states, Schedule-Free, Muon, Adam-atan2.

Parameters and gradients are dicts (or lists) of numpy arrays; every step
function works on one tensor and mutates it in place, mirroring a fused
kernel that makes a single pass over memory.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

CLIP_EPS = 1e-6


# ---------------------------------------------------------------------------
# Clipping
# ---------------------------------------------------------------------------

def global_norm(grads) -> float:
    total = 0.0
    for g in _values(grads):
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_coefficient(grads, max_norm: float) -> float:
    """min(1, max_norm / (||g||_2 + 1e-6)); gradients are not modified."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    return min(1.0, max_norm / (global_norm(grads) + CLIP_EPS))


def _values(tensors):
    return tensors.values() if isinstance(tensors, dict) else tensors


# ---------------------------------------------------------------------------
# 8-bit block quantization
# ---------------------------------------------------------------------------

@dataclass
class QuantizedState:
    codes: np.ndarray   # int8, flattened and padded to whole blocks
    scales: np.ndarray  # one per block
    block_size: int
    shape: tuple


def quantize_state(t, block_size: int = 2048) -> QuantizedState:
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    t = np.asarray(t, dtype=np.float64)
    flat = t.ravel()
    n_blocks = max(1, -(-flat.size // block_size))
    padded = np.zeros(n_blocks * block_size)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)
    scales = np.abs(blocks).max(axis=1)
    safe = np.where(scales > 0, scales, 1.0)
    codes = np.rint(blocks / safe[:, None] * 127.0).astype(np.int8)
    return QuantizedState(codes.ravel(), scales, block_size, t.shape)


def dequantize_state(q: QuantizedState) -> np.ndarray:
    blocks = q.codes.reshape(-1, q.block_size).astype(np.float64)
    vals = blocks * (q.scales[:, None] / 127.0)
    n = int(np.prod(q.shape))
    return vals.ravel()[:n].reshape(q.shape)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    hyper: AdamWHyper = field(default_factory=AdamWHyper)
    quant_block: int | None = None  # when set, m and v are kept as 8-bit codes

    @classmethod
    def zeros_like(cls, param, hyper: AdamWHyper | None = None, quant_block=None):
        st = cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64),
                 0, hyper or AdamWHyper(), quant_block)
        if quant_block:
            st.m = quantize_state(st.m, quant_block)
            st.v = quantize_state(st.v, quant_block)
        return st


def adamw_step(param: np.ndarray, grad, state: AdamWState, clip_coef: float = 1.0,
               lr: float | None = None, weight_decay: float | None = None) -> np.ndarray:
    """One fused AdamW update of ``param`` (in place). Returns ``param``.

    Order: scale grad by clip_coef; decoupled decay; moment EMAs; bias
    correction with the incremented step; adaptive update.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(f"shape mismatch: {param.shape} vs {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    hp = state.hyper
    lr = hp.lr if lr is None else lr
    wd = hp.weight_decay if weight_decay is None else weight_decay
    quant = state.quant_block is not None
    m = dequantize_state(state.m) if quant else state.m
    v = dequantize_state(state.v) if quant else state.v

    state.step += 1
    t = state.step
    g = grad * clip_coef
    param *= 1.0 - lr * wd
    m *= hp.beta1
    m += (1.0 - hp.beta1) * g
    v *= hp.beta2
    v += (1.0 - hp.beta2) * g * g
    bc1 = 1.0 - hp.beta1 ** t
    bc2 = 1.0 - hp.beta2 ** t
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + hp.eps)

    if quant:
        state.m = quantize_state(m, state.quant_block)
        state.v = quantize_state(v, state.quant_block)
    return param


def adamw_reference(param, grad, m, v, t, hyper: AdamWHyper, clip_coef=1.0):
    """Unfused six-pass AdamW, returning fresh (param, m, v). Used as an oracle."""
    g = grad * clip_coef                                     # pass 1
    p = param * (1.0 - hyper.lr * hyper.weight_decay)        # pass 2
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * g            # pass 3
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g        # pass 4
    m_hat = m / (1.0 - hyper.beta1 ** t)                     # pass 5
    v_hat = v / (1.0 - hyper.beta2 ** t)
    p = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)  # pass 6
    return p, m, v


# ---------------------------------------------------------------------------
# Schedule-Free
# ---------------------------------------------------------------------------

def schedulefree_step(theta, z, g, lr: float, beta: float, t: int):
    """Return (theta', z'). z tracks the SGD iterate, theta its running blend."""
    if t < 1:
        raise ValueError("t must be >= 1")
    z_new = beta * z + (1.0 - beta) * (theta - lr * g)
    gamma = beta ** t
    theta_new = (1.0 - gamma) * z_new + gamma * theta
    return theta_new, z_new


# ---------------------------------------------------------------------------
# Newton-Schulz / Muon
# ---------------------------------------------------------------------------

def newton_schulz(g, steps: int = 10, rescale: bool = False, return_history: bool = False):
    """Approximate the orthogonal polar factor of ``g``.

    X0 = G/||G||_F, then X <- 1.5 X - 0.5 X X^T X. With ``rescale=True`` the
    result is multiplied back by ||G||_F.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("newton_schulz expects a matrix")
    norm = np.linalg.norm(g)
    if norm == 0.0:
        raise ValueError("zero matrix has no polar factor")
    tall = g.shape[0] > g.shape[1]
    x = (g.T if tall else g) / norm  # iterate on the wide form: X X^T is the small Gram
    history = []
    for _ in range(steps):
        x = 1.5 * x - 0.5 * (x @ x.T) @ x
        if return_history:
            history.append(orthogonality_error(x.T if tall else x))
    x = x.T if tall else x
    if rescale:
        x = x * norm
    return (x, history) if return_history else x


def orthogonality_error(x) -> float:
    """||X^T X - I||_F on the min(m, n) side."""
    gram = x.T @ x if x.shape[0] >= x.shape[1] else x @ x.T
    return float(np.linalg.norm(gram - np.eye(gram.shape[0])))


def muon_step(param: np.ndarray, grad, lr: float, steps: int = 5,
              fallback_state: AdamWState | None = None) -> np.ndarray:
    """theta <- theta - lr * orth(grad). 1-D tensors use AdamW instead."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    if param.ndim < 2:
        if fallback_state is None:
            fallback_state = AdamWState.zeros_like(param, AdamWHyper(lr=lr))
        return adamw_step(param, grad, fallback_state, lr=lr)
    if np.linalg.norm(grad) < 1e-12:
        return param
    param -= lr * newton_schulz(grad, steps)
    return param


# ---------------------------------------------------------------------------
# Adam-atan2
# ---------------------------------------------------------------------------

def adam_atan2_update(m_hat, v_hat) -> np.ndarray:
    return np.arctan2(m_hat, np.sqrt(v_hat))


def adam_atan2_step(param, m_hat, v_hat, lr: float):
    """theta - lr * atan2(m_hat, sqrt(v_hat)); bounded by lr*pi/2 per element."""
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if np.any(v_hat < 0):
        raise ValueError("v_hat must be non-negative")
    return param - lr * adam_atan2_update(m_hat, v_hat)


@dataclass
class Atan2State:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999


def atan2_adam_update(param, grad, state: Atan2State, lr: float, clip_coef=1.0,
                      weight_decay: float = 0.0):
    """Full Adam-atan2 iteration (moments + bias correction + atan2 step), in place."""
    grad = np.asarray(grad, dtype=np.float64) * clip_coef
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    state.step += 1
    t = state.step
    param *= 1.0 - lr * weight_decay
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** t)
    v_hat = state.v / (1 - state.beta2 ** t)
    param -= lr * adam_atan2_update(m_hat, v_hat)
    return param


# ---------------------------------------------------------------------------
# LoRA+ parameter groups
# ---------------------------------------------------------------------------

LORA_A_PATTERNS = (r"lora_A", r"\.A$", r"_A$")
LORA_B_PATTERNS = (r"lora_B", r"\.B$", r"_B$")


@dataclass
class ParamGroup:
    label: str  # "lora_A", "lora_B" or "other"
    names: list
    lr: float
    weight_decay: float


def classify_param(name: str) -> str:
    if any(re.search(p, name) for p in LORA_A_PATTERNS):
        return "lora_A"
    if any(re.search(p, name) for p in LORA_B_PATTERNS):
        return "lora_B"
    return "other"


def build_lora_plus_groups(names, base_lr: float, ratio: float = 16.0,
                           weight_decay: float = 0.0) -> list:
    """Split parameter names into lora_A / lora_B / other groups.

    lora_B gets lr * ratio and weight_decay * ratio.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    buckets = {"lora_A": [], "lora_B": [], "other": []}
    for name in names:
        buckets[classify_param(name)].append(name)
    return [
        ParamGroup("lora_A", buckets["lora_A"], base_lr, weight_decay),
        ParamGroup("lora_B", buckets["lora_B"], base_lr * ratio, weight_decay * ratio),
        ParamGroup("other", buckets["other"], base_lr, weight_decay),
    ]
