"""Fast threshold-division surrogates for the skip comparison.

The pruning rule skips a multiply-accumulate when |Z| <= T / |C|, where C
is the operand shared across many MACs (the activation in a fully
connected layer, the weight in a convolution).  A true division per
control term is what these surrogates avoid:

* ``BitShift``  - estimate the exponent of a magnitude by shifting it
  right until it reaches zero; the count n is the smallest n with
  raw < 2**n.  A nonzero initial shift trades accuracy for fewer
  iterations and quantizes estimates upward.
* ``TreeSearch`` - the same exponent through a fixed balanced comparison
  tree over the pivot set {2**1 .. 2**w}; always ceil(log2(w))
  comparisons, no data-dependent latency.
* ``BitMask``   - approximate X/T directly as 2**(E_X - E_T) by
  subtracting IEEE-754 exponent fields and re-biasing, mantissa ignored.

In exponent space the skip test "e(|Z|) + e(|C|) <= e(T)" is exact
integer arithmetic.  Because e(x) is the smallest n with x < 2**n, the
test is equivalent to raw(|Z|) < 2**(e(T) - e(|C|)), so a kernel can
precompute the right-hand side once per control term and pay a single
integer comparison per MAC.  The fixed-point binary point contributes
the same constant offset to both sides of the comparison and cancels;
raw integer magnitudes are therefore the working domain throughout.

Zero operands never reach an estimator: a zero activation or weight
makes the product exactly zero and is skipped unconditionally (lossless,
no division, no estimate).  The ZERO sentinel below exists for the
remaining direct uses (bench-div sweeps, a zero threshold) and compares
below every reachable exponent.

Estimate quality: with both operand exponents bracketing their values
(2**(n-1) <= x < 2**n), a skip/keep decision in exponent space can
disagree with the exact rule only when |Z * C| lies within a factor of 4
of T.  Ties bias toward keeping, which costs cycles, never accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Final, Sequence

import numpy as np

from .errors import NonNormalInput, UsageError, ZeroControlTerm
from .numerics import float_decompose, float_recompose

# Compares below every reachable exponent (|n| <= 32 in practice) while
# keeping e(T) - e(C) arithmetic total on plain ints.
ZERO_EXPONENT: Final[int] = -(1 << 30)


@dataclass(frozen=True)
class ExponentEstimate:
    """Exponent bracket of a magnitude: smallest n with raw < 2**n.

    ``shifts`` and ``comparisons`` record the work this particular call
    executed; they feed operation counters, not the estimate itself.
    """

    n: int
    shifts: int = 0
    comparisons: int = 0

    @property
    def is_zero(self) -> bool:
        return self.n == ZERO_EXPONENT


class DivMethod(Enum):
    """How the threshold comparison T/|C| is obtained."""

    EXACT = "exact"
    BIT_SHIFT = "shift"
    TREE_SEARCH = "tree"
    BIT_MASK = "mask"

    @classmethod
    def from_name(cls, name: str) -> "DivMethod":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise UsageError(f"unknown div method {name!r} (choose from {valid})") from None


def exponent_bitshift(magnitude: int, initial_shift: int = 0) -> ExponentEstimate:
    """Exponent of a nonnegative raw magnitude by repeated right shift.

    Returns the smallest n >= initial_shift with magnitude < 2**n, i.e.
    max(bit_length, initial_shift); a nonzero starting shift quantizes
    coarse estimates upward.  Zero input returns the ZERO sentinel with
    no shifts executed.
    """
    if magnitude < 0:
        raise UsageError("magnitude must be nonnegative")
    if initial_shift < 0:
        raise UsageError("initial_shift must be nonnegative")
    if magnitude == 0:
        return ExponentEstimate(ZERO_EXPONENT, shifts=0)
    n = initial_shift
    rest = magnitude >> initial_shift
    shifts = 0
    while rest:
        rest >>= 1
        shifts += 1
    return ExponentEstimate(n + shifts, shifts=shifts)


class ExponentTree:
    """Fixed balanced comparison tree over power-of-two pivots.

    The default table for a w-bit word holds every exponent 1..w, which
    makes the search exact and costs exactly ceil(log2(w)) comparisons
    per lookup.  A custom (sparser) table quantizes estimates up to the
    next listed exponent; the table is immutable and shareable.
    """

    def __init__(self, word_size: int = 16, pivot_exponents: Sequence[int] | None = None):
        if pivot_exponents is None:
            pivot_exponents = range(1, word_size + 1)
        exps = sorted(set(int(e) for e in pivot_exponents))
        if not exps or exps[0] < 1:
            raise UsageError("pivot exponents must be positive")
        if exps[-1] < word_size:
            raise UsageError(
                f"pivot table must reach exponent {word_size} to cover the word"
            )
        self.word_size = word_size
        self.exponents: tuple[int, ...] = tuple(exps)
        self.depth = max(1, math.ceil(math.log2(len(exps))))

    def lookup(self, magnitude: int) -> ExponentEstimate:
        """Smallest listed n with magnitude < 2**n; ZERO for zero input."""
        if magnitude < 0:
            raise UsageError("magnitude must be nonnegative")
        if magnitude == 0:
            return ExponentEstimate(ZERO_EXPONENT, comparisons=0)
        exps = self.exponents
        lo, hi = 0, len(exps)
        while lo < hi:
            mid = (lo + hi) // 2
            if magnitude < (1 << exps[mid]):
                hi = mid
            else:
                lo = mid + 1
        # Magnitudes at or beyond 2**w cannot occur in a w-bit register;
        # report the top exponent rather than fail.
        idx = min(lo, len(exps) - 1)
        return ExponentEstimate(exps[idx], comparisons=self.depth)


_DEFAULT_TREE: Final[ExponentTree] = ExponentTree(word_size=16)


def exponent_treesearch(magnitude: int, tree: ExponentTree | None = None) -> ExponentEstimate:
    """Exponent of a raw magnitude via the balanced pivot tree."""
    return (tree or _DEFAULT_TREE).lookup(magnitude)


def exponent_of_scalar(value: float) -> int:
    """Smallest integer n with |value| < 2**n, ZERO sentinel for 0.

    Works on real-valued magnitudes (a quantized threshold need not be
    an integer); agrees with bit_length on integers.
    """
    mag = abs(value)
    if mag == 0:
        return ZERO_EXPONENT
    _, e = math.frexp(mag)  # mag = m * 2**e with m in [0.5, 1)
    return e


def approx_ratio_bitmask(x: float, t: float) -> float:
    """Approximate |x/t| as 2**(E_x - E_t) using only exponent fields.

    Both operands are decomposed as float32; the exponent difference is
    re-biased and clamped into the normal range [1, 254] so the result
    is always finite and comparable.  The mantissa is dropped, so the
    result is within a factor of 2 of the true ratio (strictly inside
    (1/2, 2) relative error).
    """
    dx = float_decompose(x)
    dt = float_decompose(t)
    if dx.biased_exponent in (0, 255) or dt.biased_exponent in (0, 255):
        raise NonNormalInput("operands must be finite normal floats")
    rebias = dx.biased_exponent - dt.biased_exponent + 127
    rebias = min(max(rebias, 1), 254)
    return float_recompose(type(dx)(sign=0, biased_exponent=rebias, mantissa=0))


def exact_threshold(t: float, c: float) -> float:
    """Reference threshold T/|C| with a true full-precision division."""
    mag = abs(c)
    if mag == 0:
        raise ZeroControlTerm("control term is zero; skip all dependent MACs")
    return t / mag


# ---------------------------------------------------------------------------
# Vector forms used by the kernels.  Semantically identical to the scalar
# operations above (the tests pin exact agreement); they exist so a whole
# weight tensor or activation vector is handled in one numpy pass.


def exponent_vector(magnitudes: np.ndarray) -> np.ndarray:
    """Elementwise smallest n with value < 2**n; ZERO sentinel at zeros.

    Exact for integer magnitudes below 2**53 (np.frexp on the float64
    cast reproduces bit_length).
    """
    mags = np.abs(magnitudes.astype(np.float64))
    _, exps = np.frexp(mags)
    return np.where(mags == 0, ZERO_EXPONENT, exps.astype(np.int64))


def approx_ratio_bitmask_vector(x: float, t_values: np.ndarray) -> np.ndarray:
    """approx_ratio_bitmask(x, t) for a vector of control magnitudes.

    Zero entries in t_values yield +inf (skip-all: nothing can exceed
    the threshold), mirroring the ZeroControlTerm path of the scalar
    API.  x must be a finite normal float32 value.
    """
    ex = float_decompose(x).biased_exponent
    tf = np.abs(t_values.astype(np.float32))
    bits = tf.view(np.uint32)
    et = (bits >> np.uint32(23)) & np.uint32(0xFF)
    rebias = np.clip(np.int64(ex) - et.astype(np.int64) + 127, 1, 254)
    out = (rebias.astype(np.uint32) << np.uint32(23)).view(np.float32)
    return np.where(tf == 0, np.float32(np.inf), out)
