"""Software emulation of IEEE-754 binary16 (half precision).

Scalars are represented by :class:`HalfValue`, a 16-bit pattern. Arrays are
carried in ``float32`` containers whose every element is exactly
representable in binary16; :func:`round_array` is the vectorised rounding
used by the tensor engine.

Rounding is round-to-nearest, ties-to-even, with gradual underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

UNIT_ROUNDOFF = 2.0**-11
SMALLEST_SUBNORMAL = 2.0**-24
SMALLEST_NORMAL = 2.0**-14
MAX_FINITE = 65504.0
# first binary32 magnitude that rounds to infinity
OVERFLOW_THRESHOLD = 65520.0

_OPS_UNARY = {"neg", "sqrt", "exp", "tanh", "sin", "cos"}
_OPS_BINARY = {"add", "sub", "mul", "div", "max"}


class DomainError(ValueError):
    """Raised when an argument lies outside the domain where a bound applies."""


# ---------------------------------------------------------------------------
# vectorised kernels


def _magic_table() -> np.ndarray:
    # For a binary32 biased exponent e, the binary16 spacing is 2^(max(e,113)-137).
    # Adding 1.5*2^23 times that spacing moves x into a binade whose ulp equals
    # the spacing, so one binary32 add performs the rounding (ties to even).
    e = np.clip(np.arange(256), 113, 143) + 13
    return ((e.astype(np.uint32) << np.uint32(23)) | np.uint32(0x400000)).view(np.float32)


_MAGIC = _magic_table()


@nb.njit(cache=True)
def _round_inplace(x, magic):
    u = x.view(np.uint32)
    for i in range(x.size):
        c = magic[(u[i] >> np.uint32(23)) & np.uint32(0xFF)]
        r = (x[i] + c) - c
        r = np.float32(np.inf) if abs(r) >= np.float32(65536.0) else r
        x[i] = np.copysign(r, x[i])


@nb.njit(cache=True)
def _matmul_half(at, b, magic, out):
    # at: (k, m) = transposed left operand, b: (k, n).
    # Each product is rounded, then the k products are summed pairwise
    # (halves added) with a rounding after every addition.
    k, m = at.shape
    n = b.shape[1]
    buf = np.empty((max(k, 1), m), np.float32)
    for j in range(n):
        for t in range(k):
            bj = b[t, j]
            for i in range(m):
                buf[t, i] = at[t, i] * bj
            _round_inplace(buf[t], magic)
        w = k
        while w > 1:
            h = w // 2
            for t in range(h):
                row = buf[t]
                other = buf[t + h]
                for i in range(m):
                    row[i] = row[i] + other[i]
                _round_inplace(row, magic)
            if w % 2 == 1:
                buf[h, :] = buf[2 * h, :]
                w = h + 1
            else:
                w = h
        for i in range(m):
            out[i, j] = buf[0, i] if k > 0 else np.float32(0.0)


def round_array(x) -> np.ndarray:
    """Round an array to binary16, returning a float32 carrier array.

    ``float32`` input is rounded directly; wider input is rounded in one step
    from its exact value (no intermediate binary32 rounding).
    """
    x = np.asarray(x)
    if x.dtype == np.float32:
        out = np.array(x, dtype=np.float32, order="C", copy=True)
        _round_inplace(out.reshape(-1), _MAGIC)
        return out
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float16).astype(np.float32)


def matmul_half(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Binary16 matrix product rounding every product and every partial sum.

    Accumulation is pairwise over the inner dimension. Slow (a few ns per
    multiply-add); the tensor engine defaults to binary32 accumulation.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    m, n = a.shape[0], b.shape[1]
    if n > m:
        # (a b)^T = b^T a^T with the same products and reduction tree
        return matmul_half(b.T, a.T).T
    out = np.empty((m, n), np.float32)
    _matmul_half(np.ascontiguousarray(a.T), np.ascontiguousarray(b), _MAGIC, out)
    return out


def pairwise_sum_half(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, rounding to binary16 after every partial add.

    The reduction tree matches :func:`matmul_half` (halves are added).
    """
    x = np.asarray(x, dtype=np.float32)
    n = x.shape[-1]
    if n == 0:
        return np.zeros(x.shape[:-1], np.float32)
    while n > 1:
        h = n // 2
        s = round_array(x[..., :h] + x[..., h : 2 * h])
        if n % 2:
            s = np.concatenate([s, x[..., 2 * h :]], axis=-1)
        x = s
        n = x.shape[-1]
    return x[..., 0]


# ---------------------------------------------------------------------------
# scalar interface


def _encode(v: float) -> int:
    """Bit pattern of a value already representable in binary16."""
    if math.isnan(v):
        return 0x7E00
    sign = 0x8000 if math.copysign(1.0, v) < 0 else 0
    a = abs(v)
    if math.isinf(a):
        return sign | 0x7C00
    if a == 0.0:
        return sign
    if a < SMALLEST_NORMAL:
        return sign | int(a / SMALLEST_SUBNORMAL)
    m, e = math.frexp(a)
    exp = e - 1 + 15
    frac = int((m * 2.0 - 1.0) * 1024.0)
    return sign | (exp << 10) | frac


def _decode(bits: int) -> float:
    sign = -1.0 if bits & 0x8000 else 1.0
    exp = (bits >> 10) & 0x1F
    frac = bits & 0x3FF
    if exp == 0x1F:
        return sign * math.inf if frac == 0 else math.nan
    if exp == 0:
        return sign * math.ldexp(frac, -24)
    return sign * math.ldexp(1024 + frac, exp - 25)


@dataclass(frozen=True)
class HalfValue:
    """A binary16 number, stored as its 16-bit pattern."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"not a 16-bit pattern: {self.bits!r}")

    @classmethod
    def from_float(cls, x: float) -> "HalfValue":
        return round_to_half(x)

    @property
    def value(self) -> float:
        return _decode(self.bits)

    def __float__(self) -> float:
        return self.value

    @property
    def sign(self) -> int:
        return self.bits >> 15

    @property
    def exponent_bits(self) -> int:
        return (self.bits >> 10) & 0x1F

    @property
    def significand_bits(self) -> int:
        return self.bits & 0x3FF

    def is_nan(self) -> bool:
        return self.exponent_bits == 0x1F and self.significand_bits != 0

    def is_inf(self) -> bool:
        return self.exponent_bits == 0x1F and self.significand_bits == 0

    def is_subnormal(self) -> bool:
        return self.exponent_bits == 0 and self.significand_bits != 0

    def __repr__(self) -> str:
        return f"HalfValue(0x{self.bits:04x}={self.value!r})"


def decode(h: HalfValue) -> float:
    return h.value


def encode(x: float) -> HalfValue:
    """Encode a value that is exactly representable (no rounding performed)."""
    v = float(x)
    bits = _encode(v)
    if not math.isnan(v) and _decode(bits) != v:
        raise ValueError(f"{v!r} is not representable in binary16")
    return HalfValue(bits)


def round_to_half(x: float) -> HalfValue:
    """Nearest binary16 value to the binary32 number ``x`` (ties to even)."""
    f = np.float32(x)
    r = round_array(np.array([f], dtype=np.float32))[0]
    bits = _encode(float(r))
    if math.isnan(float(r)) and np.signbit(f):
        bits |= 0x8000
    return HalfValue(bits)


def half_op(op: str, a: HalfValue, b: HalfValue | None = None) -> HalfValue:
    """Apply ``op`` in binary32 to the decoded operands, then round to binary16."""
    x = np.float32(a.value)
    if op in _OPS_UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        with np.errstate(all="ignore"):
            r = {
                "neg": lambda: -x,
                "sqrt": lambda: np.sqrt(x),
                "exp": lambda: np.exp(x),
                "tanh": lambda: np.tanh(x),
                "sin": lambda: np.sin(x),
                "cos": lambda: np.cos(x),
            }[op]()
    elif op in _OPS_BINARY:
        if b is None:
            raise TypeError(f"{op} takes two operands")
        y = np.float32(b.value)
        with np.errstate(all="ignore"):
            r = {
                "add": lambda: x + y,
                "sub": lambda: x - y,
                "mul": lambda: x * y,
                "div": lambda: x / y,
                "max": lambda: np.maximum(x, y),
            }[op]()
    else:
        raise ValueError(f"unknown op {op!r}")
    return round_to_half(np.float32(r))


def relative_rounding_error(x: float) -> float:
    x32 = float(np.float32(x))
    if x32 == 0.0 or not SMALLEST_NORMAL <= abs(x32) <= MAX_FINITE:
        raise DomainError(f"{x!r} is outside the binary16 normal range")
    return abs(round_to_half(x32).value - x32) / abs(x32)


@dataclass(frozen=True)
class RoundingModel:
    unit_roundoff: float = UNIT_ROUNDOFF
    underflow_threshold: float = SMALLEST_SUBNORMAL
    smallest_normal: float = SMALLEST_NORMAL
    max_finite: float = MAX_FINITE

    def in_normal_range(self, x) -> np.ndarray:
        a = np.abs(np.asarray(x, dtype=np.float64))
        return (a >= self.smallest_normal) & (a <= self.max_finite)

    def error_bound(self, x) -> np.ndarray:
        """Worst-case absolute rounding error ``u*|x|`` (normal range only)."""
        return self.unit_roundoff * np.abs(np.asarray(x, dtype=np.float64))


def inspect(x: float) -> dict:
    """Bits, decoded value and rounding error of ``x`` rounded to binary16."""
    f = float(np.float32(x))
    h = round_to_half(f)
    info = {
        "input": f,
        "bits": f"{h.bits:016b}",
        "hex": f"0x{h.bits:04x}",
        "sign": h.sign,
        "exponent": h.exponent_bits,
        "significand": h.significand_bits,
        "value": h.value,
        "subnormal": h.is_subnormal(),
        "abs_error": abs(h.value - f) if math.isfinite(h.value) else math.inf,
    }
    try:
        info["rel_error"] = relative_rounding_error(f)
    except DomainError:
        info["rel_error"] = None
    info["unit_roundoff"] = UNIT_ROUNDOFF
    info["smallest_normal"] = SMALLEST_NORMAL
    info["smallest_subnormal"] = SMALLEST_SUBNORMAL
    return info
