"""Software FP8 (E4M3 / E5M2) codec, block-wise quantization and delayed scaling.

E4M3 follows the saturating "fn" convention: no infinities, a single NaN
mantissa pattern per sign (0x7F / 0xFF), max finite 448. E5M2 is IEEE-like:
exponent field 31 is inf/NaN and never produced. Out-of-range inputs are
clamped to +-max finite, and rounding is to nearest with ties to even.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Fp8Format:
    name: str
    exp_bits: int
    man_bits: int
    bias: int
    max_finite: float
    min_subnormal: float

    @property
    def min_normal_exp(self) -> int:
        return 1 - self.bias

    def is_valid_code(self, code: int) -> bool:
        e = (code >> self.man_bits) & ((1 << self.exp_bits) - 1)
        m = code & ((1 << self.man_bits) - 1)
        if self.name == "E4M3":
            return not (e == 15 and m == 7)
        return e != (1 << self.exp_bits) - 1


E4M3 = Fp8Format("E4M3", 4, 3, 7, 448.0, 2.0 ** -9)
E5M2 = Fp8Format("E5M2", 5, 2, 15, 57344.0, 2.0 ** -16)
FORMATS = {"E4M3": E4M3, "E5M2": E5M2}


def get_format(fmt) -> Fp8Format:
    if isinstance(fmt, Fp8Format):
        return fmt
    try:
        return FORMATS[str(fmt).upper()]
    except KeyError:
        raise ValueError(f"unknown FP8 format {fmt!r}") from None


def fp8_decode(code, fmt=E4M3):
    """Decode uint8 code(s) from sign/exponent/mantissa bit fields."""
    fmt = get_format(fmt)
    code = np.asarray(code, dtype=np.int64)
    sign = np.where(code & 0x80, -1.0, 1.0)
    e = (code >> fmt.man_bits) & ((1 << fmt.exp_bits) - 1)
    m = (code & ((1 << fmt.man_bits) - 1)).astype(np.float64)
    frac = m / (1 << fmt.man_bits)
    normal = np.ldexp(1.0 + frac, (e - fmt.bias).astype(np.int64))
    sub = np.ldexp(frac, fmt.min_normal_exp)
    val = sign * np.where(e == 0, sub, normal)
    valid = np.vectorize(fmt.is_valid_code)(code & 0xFF) if code.ndim else fmt.is_valid_code(int(code) & 0xFF)
    val = np.where(valid, val, np.nan)
    return float(val) if np.ndim(val) == 0 else val


def fp8_round(x, fmt=E4M3):
    """Nearest representable value (ties to even mantissa), saturating at max."""
    fmt = get_format(fmt)
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise ValueError("cannot encode NaN to FP8")
    a = np.minimum(np.abs(x), fmt.max_finite)
    _, e2 = np.frexp(a)
    e = np.maximum(e2 - 1, fmt.min_normal_exp)
    quantum = np.ldexp(1.0, e - fmt.man_bits)
    r = np.rint(a / quantum) * quantum
    return np.copysign(r, x)


def fp8_encode(x, fmt=E4M3):
    """Encode real(s) to uint8 code(s)."""
    fmt = get_format(fmt)
    x = np.asarray(x, dtype=np.float64)
    r = fp8_round(x, fmt)
    a = np.abs(r)
    _, e2 = np.frexp(a)
    is_sub = a < math.ldexp(1.0, fmt.min_normal_exp)
    exp_field = np.where(is_sub, 0, e2 - 1 + fmt.bias)
    unit = np.ldexp(1.0, np.where(is_sub, fmt.min_normal_exp, e2 - 1) - fmt.man_bits)
    mant = np.rint(a / unit).astype(np.int64) - np.where(is_sub, 0, 1 << fmt.man_bits)
    code = (np.signbit(r).astype(np.int64) << 7) | (exp_field.astype(np.int64) << fmt.man_bits) | mant
    code = code.astype(np.uint8)
    return int(code) if code.ndim == 0 else code


def code_table(fmt=E4M3):
    """(codes, values) for every valid, finite code of the format."""
    fmt = get_format(fmt)
    codes = np.array([c for c in range(256) if fmt.is_valid_code(c)], dtype=np.int64)
    return codes, fp8_decode(codes, fmt)


def ulp_at(x, fmt=E4M3):
    """Spacing of the FP8 grid in the binade containing |x|."""
    fmt = get_format(fmt)
    _, e2 = np.frexp(np.abs(np.asarray(x, dtype=np.float64)))
    e = np.maximum(e2 - 1, fmt.min_normal_exp)
    return np.ldexp(1.0, e - fmt.man_bits)


# ---------------------------------------------------------------------------
# Block-wise quantization
# ---------------------------------------------------------------------------

@dataclass
class Fp8Block:
    codes: np.ndarray   # uint8, flattened, padded to whole blocks
    scales: np.ndarray  # one per block
    fmt: Fp8Format
    shape: tuple
    block_size: int


def quantize_block(t, block_size: int = 128, fmt=E4M3) -> Fp8Block:
    fmt = get_format(fmt)
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    t = np.asarray(t, dtype=np.float64)
    flat = t.ravel()
    n_blocks = max(1, -(-flat.size // block_size))
    padded = np.zeros(n_blocks * block_size)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)
    amax = np.abs(blocks).max(axis=1)
    scales = amax / fmt.max_finite
    safe = np.where(scales > 0, scales, 1.0)
    scaled = np.clip(blocks / safe[:, None], -fmt.max_finite, fmt.max_finite)
    codes = fp8_encode(scaled, fmt)
    return Fp8Block(np.asarray(codes, dtype=np.uint8).ravel(), scales, fmt, t.shape, block_size)


def quantize_block_e4m3(t, block_size: int = 128) -> Fp8Block:
    return quantize_block(t, block_size, E4M3)


def dequantize_block(q: Fp8Block) -> np.ndarray:
    vals = fp8_decode(q.codes.reshape(-1, q.block_size), q.fmt) * q.scales[:, None]
    n = int(np.prod(q.shape))
    return vals.ravel()[:n].reshape(q.shape)


def coarse_error_bound(amax, fmt=E4M3):
    """amax / max_finite * 2^-man_bits (amax/3584 for E4M3)."""
    fmt = get_format(fmt)
    return amax / fmt.max_finite * 2.0 ** -fmt.man_bits


def element_error_bound(x, scale, fmt=E4M3):
    """Half an FP8 ulp of x/scale, mapped back by the block scale."""
    if scale == 0:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    return 0.5 * scale * ulp_at(np.asarray(x) / scale, fmt)


# ---------------------------------------------------------------------------
# Delayed scaling
# ---------------------------------------------------------------------------

@dataclass
class AmaxHistory:
    capacity: int = 32
    fmt: Fp8Format = E4M3
    buffer: deque = field(default=None)

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = deque(maxlen=self.capacity)

    def push(self, amax: float):
        self.buffer.append(float(amax))

    @property
    def scale(self) -> float:
        if not self.buffer:
            return 0.0
        return max(self.buffer) / self.fmt.max_finite


def delayed_scale_update(history: AmaxHistory, tensor):
    """Record the tensor's amax, then encode it with the window-max scale."""
    tensor = np.asarray(tensor, dtype=np.float64)
    history.push(np.abs(tensor).max() if tensor.size else 0.0)
    scale = history.scale
    safe = scale if scale > 0 else 1.0
    fmt = history.fmt
    scaled = np.clip(tensor / safe, -fmt.max_finite, fmt.max_finite)
    return fp8_encode(scaled, fmt), scale, history


# ---------------------------------------------------------------------------
# Error calculators
# ---------------------------------------------------------------------------

def snr_db(fmt=E4M3) -> float:
    return 6.02 * get_format(fmt).man_bits + 1.76


def accum_error(n: int, eps: float) -> float:
    return math.sqrt(n) * eps
