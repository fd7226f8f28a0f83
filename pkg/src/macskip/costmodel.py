"""Compute-only cycle and energy pricing for MCU-class targets.

Prices the operation counters an inference produced; data movement is
deliberately out of model (reports label the numbers as compute-only).
The default profile reflects a software-multiply MCU: a multiply costs
~77 cycles, an add 6, a compare 3, a hardware-free divide is priced like
a multiply, and shifts are single-cycle.

A threshold "division" is priced per method: the exact method pays a
real division; bit shifting pays its shift iterations (tracked in the
`shifts` counter) plus one terminating comparison per call; tree search
pays its fixed comparison depth; bit masking pays two exponent-field
adds and a compare.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .divapprox import DivMethod
from .errors import UsageError

DEFAULT_ENERGY_PER_CYCLE = 1.375e-9  # joules; configurable, not a measurement


@dataclass(frozen=True)
class CostProfile:
    """Per-operation cycle prices plus an energy-per-cycle constant."""

    c_mul: int = 77
    c_add: int = 6
    c_cmp: int = 3
    c_div: int = 77
    c_shift: int = 1
    energy_per_cycle: float = DEFAULT_ENERGY_PER_CYCLE

    def __post_init__(self) -> None:
        for name in ("c_mul", "c_add", "c_cmp", "c_div", "c_shift"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be nonnegative")
        if self.energy_per_cycle < 0:
            raise UsageError("energy_per_cycle must be nonnegative")


MSP430_PROFILE = CostProfile()

_PROFILE_FIELDS = ("c_mul", "c_add", "c_cmp", "c_div", "c_shift", "energy_per_cycle")


def load_profile(spec: str) -> CostProfile:
    """Resolve a profile name ("msp430") or a JSON file of field overrides."""
    if spec == "msp430":
        return MSP430_PROFILE
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"unknown profile {spec!r}: not a name and not a file")
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read profile {spec!r}: {exc}") from exc
    unknown = set(data) - set(_PROFILE_FIELDS)
    if unknown:
        raise UsageError(f"unknown profile fields: {sorted(unknown)}")
    return CostProfile(**data)


def division_call_cycles(method: DivMethod, profile: CostProfile, word_size: int = 16) -> int:
    """Fixed per-call price of one threshold computation.

    The bit-shift method's data-dependent shift iterations are priced
    separately through the `shifts` counter; its fixed part is the
    loop-terminating comparison.
    """
    if method is DivMethod.EXACT:
        return profile.c_div
    if method is DivMethod.BIT_SHIFT:
        return profile.c_cmp
    if method is DivMethod.TREE_SEARCH:
        return math.ceil(math.log2(word_size)) * profile.c_cmp
    if method is DivMethod.BIT_MASK:
        return 2 * profile.c_add + profile.c_cmp
    raise UsageError(f"unpriceable method {method!r}")


def price(stats, method: DivMethod, profile: CostProfile = MSP430_PROFILE,
          word_size: int = 16) -> tuple[int, float]:
    """Price a MacStats bundle into (cycles, joules).

    cycles = executed * (c_mul + c_add)
           + comparisons * c_cmp
           + shifts * c_shift
           + divisions * per-call division price

    Linear in the stats fields, so summed stats price to summed cycles.
    Load-time threshold precomputation is excluded (one-time, amortized;
    reported separately).
    """
    stats.check()
    cycles = (
        stats.macs_executed * (profile.c_mul + profile.c_add)
        + stats.comparisons * profile.c_cmp
        + stats.shifts * profile.c_shift
        + stats.divisions * division_call_cycles(method, profile, word_size)
    )
    return cycles, cycles * profile.energy_per_cycle
