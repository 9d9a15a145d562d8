import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import pytest
from src.grid.network import interface_of
from src.optimization.constraints import ConstraintSet
from src.optimization.search import FlexProblem
from src.optimization.taps import _candidates, rank_tap_combinations, relaxed_taps, round_and_fix_taps


@pytest.fixture
def lv_case(lv_net):
    return lv_net, interface_of(lv_net, "T1"), ConstraintSet.from_network(lv_net)


class TestCandidates:
    def test_fraction_gives_floor_and_ceil(self, lv_net):
        assert _candidates(lv_net, "T1", 0.4) == [0, 1]

    def test_integral_value(self, lv_net):
        assert _candidates(lv_net, "T1", 2.0) == [2]
        assert _candidates(lv_net, "T1", -1.0000000001) == [-1]


class TestRanking:
    def test_ties_prefer_neutral(self, lv_net):
        ranked = rank_tap_combinations(lv_net, ["T1"], [(1,), (-1,), (2,)], [0.1, 0.1, 0.0])
        assert ranked == [(2,), (-1,), (1,)]

    def test_tie_tolerance(self, lv_net):
        ranked = rank_tap_combinations(lv_net, ["T1"], [(2,), (0,)], [0.1, 0.1 + 1e-10])
        assert ranked == [(0,), (2,)]

    def test_clear_winner_kept(self, lv_net):
        ranked = rank_tap_combinations(lv_net, ["T1"], [(0,), (2,)], [0.2, 0.1])
        assert ranked == [(2,), (0,)]


class TestRelaxedTaps:
    def test_within_bounds(self, lv_case):
        net, ifc, cs = lv_case
        base = FlexProblem(net, ifc, cs).base()
        for target in (base.q_if + 1.0, base.q_if - 1.0):
            relaxed = relaxed_taps(net, ifc, base, target, ["T1"])
            assert -2.0 <= relaxed["T1"] <= 2.0

    def test_no_taps(self, lv_case):
        net, ifc, cs = lv_case
        base = FlexProblem(net, ifc, cs).base()
        assert relaxed_taps(net, ifc, base, 0.0, []) == {}


class TestRoundAndFix:
    def test_out_of_bounds_fraction(self, lv_case):
        net, ifc, cs = lv_case
        with pytest.raises(ValueError, match="outside"):
            round_and_fix_taps(net, ifc, cs, 0.0, {"T1": 2.5})

    def test_rounded_taps_fixed_in_bundle(self, lv_case):
        net, ifc, cs = lv_case
        base = FlexProblem(net, ifc, cs).base()
        fixed, bundle = round_and_fix_taps(net, ifc, cs, base.q_if, {"T1": 0.3})
        assert fixed["T1"] in (0, 1)
        assert bundle.taps["T1"] == fixed["T1"]
        assert bundle.deviation == pytest.approx(base.q_if - bundle.achieved_q_if)
