"""Cycle/energy pricing: formula, linearity, per-method division cost."""

import json

import pytest

from macskip.costmodel import (
    CostProfile,
    MSP430_PROFILE,
    division_call_cycles,
    load_profile,
    price,
)
from macskip.divapprox import DivMethod
from macskip.errors import UsageError
from macskip.kernels import MacStats


def stats(total=0, executed=0, skipped=0, comparisons=0, divisions=0,
          shifts=0) -> MacStats:
    return MacStats(macs_total=total, macs_executed=executed,
                    macs_skipped=skipped, comparisons=comparisons,
                    divisions=divisions, shifts=shifts)


class TestPrice:
    def test_spec_example_181_cycles(self):
        s = stats(total=5, executed=2, skipped=3, comparisons=5)
        cycles, energy = price(s, DivMethod.EXACT, MSP430_PROFILE)
        assert cycles == 2 * 83 + 5 * 3 == 181
        assert energy == pytest.approx(181 * MSP430_PROFILE.energy_per_cycle)

    def test_division_pricing_per_method(self):
        p = MSP430_PROFILE
        assert division_call_cycles(DivMethod.EXACT, p) == 77
        assert division_call_cycles(DivMethod.BIT_SHIFT, p) == 3
        assert division_call_cycles(DivMethod.TREE_SEARCH, p) == 4 * 3
        assert division_call_cycles(DivMethod.BIT_MASK, p) == 2 * 6 + 3

    def test_tree_price_scales_with_word(self):
        assert division_call_cycles(DivMethod.TREE_SEARCH, MSP430_PROFILE,
                                    word_size=32) == 5 * 3

    def test_shifts_priced_separately(self):
        s = stats(total=4, executed=4, divisions=2, shifts=9)
        cycles, _ = price(s, DivMethod.BIT_SHIFT, MSP430_PROFILE)
        assert cycles == 4 * 83 + 9 * 1 + 2 * 3

    def test_linearity(self):
        a = stats(total=10, executed=6, skipped=4, comparisons=12, divisions=3)
        b = stats(total=7, executed=7, comparisons=2, shifts=5)
        ca, _ = price(a, DivMethod.TREE_SEARCH)
        cb, _ = price(b, DivMethod.TREE_SEARCH)
        cab, _ = price(a + b, DivMethod.TREE_SEARCH)
        assert cab == ca + cb

    def test_strictly_decreasing_in_skips(self):
        total = 1000
        prev = None
        for skipped in range(0, total + 1, 50):
            s = stats(total=total, executed=total - skipped, skipped=skipped)
            cycles, _ = price(s, DivMethod.EXACT)
            if prev is not None:
                assert cycles < prev
            prev = cycles

    def test_inconsistent_stats_rejected(self):
        bad = stats(total=10, executed=4, skipped=3)
        with pytest.raises(UsageError):
            price(bad, DivMethod.EXACT)


class TestProfiles:
    def test_msp430_constants(self):
        p = MSP430_PROFILE
        assert (p.c_mul, p.c_add, p.c_cmp, p.c_div, p.c_shift) == (77, 6, 3, 77, 1)

    def test_load_by_name_and_file(self, tmp_path):
        assert load_profile("msp430") is MSP430_PROFILE
        f = tmp_path / "p.json"
        f.write_text(json.dumps({"c_mul": 10, "c_cmp": 1}))
        p = load_profile(str(f))
        assert p.c_mul == 10 and p.c_cmp == 1 and p.c_add == 6

    def test_unknown_name_and_fields(self, tmp_path):
        with pytest.raises(UsageError):
            load_profile("cortex-m999")
        f = tmp_path / "bad.json"
        f.write_text(json.dumps({"c_mul": 10, "c_fma": 4}))
        with pytest.raises(UsageError):
            load_profile(str(f))
        g = tmp_path / "garbled.json"
        g.write_text("{not json")
        with pytest.raises(UsageError):
            load_profile(str(g))

    def test_negative_prices_rejected(self):
        with pytest.raises(UsageError):
            CostProfile(c_mul=-1)
        with pytest.raises(UsageError):
            CostProfile(energy_per_cycle=-1e-9)


class TestMacStats:
    def test_add_and_check(self):
        a = stats(total=5, executed=2, skipped=3, comparisons=1)
        b = stats(total=3, executed=3)
        c = a + b
        assert c.macs_total == 8 and c.macs_executed == 5 and c.macs_skipped == 3
        c.check()

    def test_as_dict_has_all_counters(self):
        d = MacStats().as_dict()
        assert set(d) == {"macs_total", "macs_executed", "macs_skipped",
                          "comparisons", "divisions", "threshold_precomputations",
                          "shifts", "zero_operand_macs"}
