"""Closed-form performance and memory calculators.

All sizes are in bytes; "GB" means 10**9 bytes. SRAM sizes are binary KiB.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

GB = 1e9
KIB = 1024


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    peak_flops: float      # dense BF16 FLOP/s
    hbm_bandwidth: float   # bytes/s
    sram_bytes: int        # per streaming multiprocessor

    def __post_init__(self):
        if min(self.peak_flops, self.hbm_bandwidth, self.sram_bytes) <= 0:
            raise ValueError("hardware figures must be positive")


A100 = HardwareSpec("A100", 312e12, 2e12, 192 * KIB)
PRESETS = {"A100": A100}

CUDA_CONTEXT_BYTES = 2.5 * GB


def ridge_point(hw: HardwareSpec = A100) -> float:
    """FLOPs per byte where a kernel stops being bandwidth bound."""
    return hw.peak_flops / hw.hbm_bandwidth


def arithmetic_intensity(op: str, **dims) -> float:
    """FLOPs/byte for the table operations.

    matmul(M, N) uses the MN/(2(M+N)) form; attention(N, d) is N/(d+1);
    rmsnorm is 0.5; cross_entropy is 0.375.
    """
    op = op.lower()
    if op == "matmul":
        m, n = dims["M"], dims["N"]
        return m * n / (2 * (m + n))
    if op == "attention":
        return dims["N"] / (dims["d"] + 1)
    if op == "rmsnorm":
        return 4 / 8
    if op in ("cross_entropy", "ce"):
        return 3 / 8
    raise ValueError(f"unknown operation {op!r}")


def bound_verdict(ai: float, hw: HardwareSpec = A100) -> str:
    return "memory-bound" if ai < ridge_point(hw) else "compute-bound"


def mfu(n_params: float, tokens_per_sec: float, peak_flops: float = A100.peak_flops) -> float:
    """Model FLOPs utilisation in percent: 6 N tok/s / peak."""
    return 6.0 * n_params * tokens_per_sec / peak_flops * 100.0


def checkpoint_memory_factor(n_layers: int, k: float | None = None) -> float:
    """Stored activations relative to keeping all L layers: (L/k + k)/L."""
    k = math.sqrt(n_layers) if k is None else k
    return (n_layers / k + k) / n_layers


def checkpoint_overhead(k: int) -> float:
    return 1.0 + 1.0 / k


def checkpoint_plan(n_layers: int) -> dict:
    """Real optimum sqrt(L) and the integer k minimising L/k + k."""
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    costs = {k: n_layers / k + k for k in range(1, n_layers + 1)}
    k_int = min(costs, key=lambda k: (costs[k], k))
    return {
        "layers": n_layers,
        "k_real": math.sqrt(n_layers),
        "k_int": k_int,
        "memory_factor": checkpoint_memory_factor(n_layers),
        "memory_factor_int": costs[k_int] / n_layers,
        "compute_overhead": checkpoint_overhead(k_int),
    }


def memory_budget(params: float, precision_bytes: int = 2, batch: int = 8, seq: int = 2048,
                  layers: int = 24, hidden: int = 896, vocab: int = 151936,
                  chunk: int = 16384, checkpoint: bool = False,
                  eight_bit_optim: bool = False, cce: bool = False) -> dict:
    """Itemised training memory in bytes."""
    bnd4 = batch * seq * hidden * 4
    act = (2 * math.sqrt(layers) if checkpoint else layers) * bnd4
    opt = 2 * params * 4
    if eight_bit_optim:
        opt /= 4
    logits = batch * seq * (min(chunk, vocab) if cce else vocab) * 4
    items = {
        "parameters": params * precision_bytes,
        "gradients": params * precision_bytes,
        "optimizer": opt,
        "activations": act,
        "logits": logits,
        "cuda_context": CUDA_CONTEXT_BYTES,
    }
    items["total"] = sum(items.values())
    return items


def cce_reduction(vocab: int, chunk: int) -> float:
    return vocab / chunk


def flash_io(n: int, d: int, sram: float) -> dict:
    """HBM traffic estimates for tiled attention (element counts)."""
    return {
        "tiled": n * d + n * n * d ** 1.5 / math.sqrt(sram),
        "dominant": n * n * d * d / sram,
        "standard": n * n * d,
    }


def flash_speedup(sram_bytes: float, d: int, elem_bytes: int = 2) -> dict:
    """M/d with M read as raw bytes and as BF16 element capacity."""
    return {
        "sram_as_bytes": sram_bytes / d,
        "sram_as_elements": sram_bytes / elem_bytes / d,
    }


def kv_ratio(variant: str, n_heads: int, group_size: int | None = None) -> float:
    """KV-cache size relative to multi-head attention.

    ``group_size`` is the number of query heads sharing one KV head (GQA).
    """
    variant = variant.lower()
    if variant == "mha":
        return 1.0
    if variant == "mqa":
        return 1.0 / n_heads
    if variant == "gqa":
        if not group_size or n_heads % group_size:
            raise ValueError("GQA needs a group size dividing n_heads")
        return 1.0 / group_size
    raise ValueError(f"unknown attention variant {variant!r}")


def headline_numbers(hw: HardwareSpec = A100) -> list:
    """(label, value, text) rows reproducing the headline calculator figures."""
    mb = memory_budget(494e6)
    ck = checkpoint_plan(24)
    sp = flash_speedup(hw.sram_bytes, 128)
    rows = [
        ("ridge", ridge_point(hw), f"{ridge_point(hw):.0f}"),
        ("AI(rmsnorm)", arithmetic_intensity("rmsnorm"), "0.5"),
        ("AI(cross_entropy)", arithmetic_intensity("cross_entropy"), "0.375"),
        ("AI(attention N=2048,d=64)", arithmetic_intensity("attention", N=2048, d=64), None),
        ("MFU(41184)", mfu(5e8, 41184, hw.peak_flops), None),
        ("MFU(11736)", mfu(5e8, 11736, hw.peak_flops), None),
        ("params_GB(494M bf16)", mb["parameters"] / GB, None),
        ("optimizer_GB(494M fp32)", mb["optimizer"] / GB, None),
        ("checkpoint k*(L=24)", ck["k_real"], None),
        ("checkpoint k_int(L=24)", ck["k_int"], str(ck["k_int"])),
        ("checkpoint overhead(k=5)", checkpoint_overhead(5), None),
        ("CCE reduction(151936/4096)", cce_reduction(151936, 4096), None),
        ("flash speedup M/d (bytes)", sp["sram_as_bytes"], None),
        ("flash speedup M/d (bf16 elements)", sp["sram_as_elements"], None),
        ("KV ratio MQA H=32", kv_ratio("mqa", 32), None),
    ]
    out = []
    for label, value, text in rows:
        if text is None:
            text = f"{value:.1f}%" if label.startswith("MFU") else f"{value:.4g}"
        out.append((label, value, text))
    return out


def format_table(rows) -> str:
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{label.ljust(width)}  {text}" for label, _, text in rows)
