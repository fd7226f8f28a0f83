"""Fixed-point formats and IEEE-754 single-precision field access.

Everything downstream of the trainer runs on signed fixed-point integers.
A value v is stored as the raw integer round(v * 2**fraction_bits); the
word holds 1 sign bit, `integer_bits` integer bits and `fraction_bits`
fraction bits.  Q-format names follow the convention that counts the sign
bit together with the integer bits, so QFormat(7, 8) is "Q8.8" with a
16-bit word.

Saturation is symmetric: the reachable raw range is
[-(2**(w-1) - 1), 2**(w-1) - 1], never the asymmetric two's-complement
minimum.  That keeps abs() total on the raw domain and bounds every
magnitude below 2**(w-1), which the exponent estimators rely on.

Rounding is round-to-nearest, ties to even, both when converting from
float and when rescaling products back to the working format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import NonNormalInput, UsageError

FLOAT32_BIAS = 127
FLOAT32_MANTISSA_BITS = 23
FLOAT32_MANTISSA_DENOM = 1 << FLOAT32_MANTISSA_BITS


@dataclass(frozen=True)
class QFormat:
    """Signed fixed-point layout: 1 sign + integer_bits + fraction_bits."""

    integer_bits: int
    fraction_bits: int

    def __post_init__(self) -> None:
        if self.integer_bits < 1 or self.fraction_bits < 1:
            raise UsageError("integer_bits and fraction_bits must each be >= 1")
        if self.word_size not in (16, 32):
            raise UsageError(f"word size must be 16 or 32, got {self.word_size}")

    @property
    def word_size(self) -> int:
        return 1 + self.integer_bits + self.fraction_bits

    @property
    def raw_max(self) -> int:
        return (1 << (self.word_size - 1)) - 1

    @property
    def raw_min(self) -> int:
        return -self.raw_max

    @property
    def max_value(self) -> float:
        """Largest representable value, e.g. 127.99609375 for Q8.8."""
        return self.raw_max / (1 << self.fraction_bits)

    @property
    def resolution(self) -> float:
        return 1.0 / (1 << self.fraction_bits)

    @property
    def label(self) -> str:
        return f"Q{self.integer_bits + 1}.{self.fraction_bits}"


Q8_8 = QFormat(integer_bits=7, fraction_bits=8)


@dataclass(frozen=True)
class FixedPoint:
    """One fixed-point scalar: raw integer plus its format."""

    raw: int
    fmt: QFormat

    def __post_init__(self) -> None:
        if not self.fmt.raw_min <= self.raw <= self.fmt.raw_max:
            raise UsageError(
                f"raw {self.raw} outside [{self.fmt.raw_min}, {self.fmt.raw_max}]"
            )

    @property
    def value(self) -> float:
        return fx_to_float(self)


def _saturate(raw: int, fmt: QFormat) -> int:
    if raw > fmt.raw_max:
        return fmt.raw_max
    if raw < fmt.raw_min:
        return fmt.raw_min
    return raw


def fx_from_float(v: float, fmt: QFormat = Q8_8) -> FixedPoint:
    """Convert a float to fixed point, round-half-even, saturating.

    Inputs beyond the representable range clamp to the extremes; there is
    no error path.  NaN maps to zero.
    """
    if math.isnan(v):
        return FixedPoint(0, fmt)
    if math.isinf(v):
        return FixedPoint(fmt.raw_max if v > 0 else fmt.raw_min, fmt)
    scaled = v * float(1 << fmt.fraction_bits)
    # float64 rint is round-half-even; scaling by a power of two is exact.
    raw = int(np.rint(scaled)) if abs(scaled) < 2**62 else (2**62 if scaled > 0 else -(2**62))
    return FixedPoint(_saturate(raw, fmt), fmt)


def fx_to_float(x: FixedPoint) -> float:
    """Exact float64 value of a fixed-point scalar."""
    return x.raw / float(1 << x.fmt.fraction_bits)


def round_half_even_rshift(x: int, shift: int) -> int:
    """Arithmetic right shift by `shift` with round-to-nearest-even.

    Works on plain ints of any sign.  shift == 0 is the identity.
    """
    if shift == 0:
        return x
    q = x >> shift
    r = x & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    if r > half or (r == half and (q & 1)):
        q += 1
    return q


def rhe_rshift_array(x: np.ndarray, shift: int) -> np.ndarray:
    """Vector form of round_half_even_rshift for int64 arrays."""
    if shift == 0:
        return x
    q = x >> shift
    r = x & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    inc = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + inc


def fx_mul(a: FixedPoint, b: FixedPoint) -> FixedPoint:
    """Fixed-point multiply: widen, rescale with round-half-even, saturate."""
    if a.fmt != b.fmt:
        raise UsageError("fx_mul operands must share a format")
    wide = a.raw * b.raw
    raw = round_half_even_rshift(wide, a.fmt.fraction_bits)
    return FixedPoint(_saturate(raw, a.fmt), a.fmt)


def fx_add(a: FixedPoint, b: FixedPoint) -> FixedPoint:
    """Fixed-point add with saturation."""
    if a.fmt != b.fmt:
        raise UsageError("fx_add operands must share a format")
    return FixedPoint(_saturate(a.raw + b.raw, a.fmt), a.fmt)


@dataclass(frozen=True)
class FloatDecomposition:
    """IEEE-754 binary32 fields of a finite normal float.

    value == (-1)**sign * 2**(biased_exponent - 127) * (1 + mantissa / 2**23)
    """

    sign: int
    biased_exponent: int
    mantissa: int

    def __post_init__(self) -> None:
        if self.sign not in (0, 1):
            raise UsageError("sign must be 0 or 1")
        if not 1 <= self.biased_exponent <= 254:
            raise UsageError("biased_exponent must be in [1, 254] (normal range)")
        if not 0 <= self.mantissa < FLOAT32_MANTISSA_DENOM:
            raise UsageError("mantissa must fit in 23 bits")


def float_decompose(v: float) -> FloatDecomposition:
    """Split a float into binary32 sign/exponent/mantissa fields.

    The value is first rounded to single precision; zero, subnormals,
    infinities and NaN raise NonNormalInput.
    """
    if math.isnan(v) or math.isinf(v):
        raise NonNormalInput(f"not a finite normal float: {v!r}")
    bits = struct.unpack("<I", struct.pack("<f", v))[0]
    sign = bits >> 31
    exponent = (bits >> 23) & 0xFF
    mantissa = bits & (FLOAT32_MANTISSA_DENOM - 1)
    if exponent == 0 or exponent == 0xFF:
        raise NonNormalInput(f"not a finite normal float32: {v!r}")
    return FloatDecomposition(sign, exponent, mantissa)


def float_recompose(d: FloatDecomposition) -> float:
    """Rebuild the float32 value from its fields (exact)."""
    bits = (d.sign << 31) | (d.biased_exponent << 23) | d.mantissa
    return float(struct.unpack("<f", struct.pack("<I", bits))[0])
