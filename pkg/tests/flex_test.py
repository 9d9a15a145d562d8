import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import math
from unittest.mock import patch

import pytest
from src.grid.fixtures import build_fixture_feeder
from src.grid.grid_io import network_from_dict
from src.grid.network import interface_of
from src.optimization.constraints import ConstraintSet, Infeasible, OracleTooLarge, verify_bundle
from src.optimization.flex import (
    allocate_setpoints,
    flex_methods,
    flex_range_oracle,
    flex_range_sensitivity,
    get_flex_method,
)
from src.optimization.search import FlexProblem, Objective, SensitivitySearch
from src.powerflow.sensitivity import sensitivities


@pytest.fixture
def lv_case(lv_net):
    ifc = interface_of(lv_net, "T1")
    cs = ConstraintSet.from_network(lv_net)
    return lv_net, ifc, cs


@pytest.fixture
def base_q(lv_case):
    net, ifc, cs = lv_case
    return FlexProblem(net, ifc, cs).base().q_if


@pytest.fixture
def sensitivity_range(lv_case):
    return flex_range_sensitivity(*lv_case)


class TestRegistry:
    def test_methods(self):
        assert {"oracle", "sensitivity"} <= set(flex_methods())
        assert get_flex_method("oracle") is flex_range_oracle

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="Unknown flexibility method"):
            get_flex_method("magic")


class TestSensitivityRange:
    def test_range_contains_base(self, sensitivity_range, base_q):
        assert sensitivity_range.feasible
        assert sensitivity_range.q_min < base_q < sensitivity_range.q_max

    def test_witnesses_verify(self, lv_case, sensitivity_range):
        net, ifc, cs = lv_case
        for witness in (sensitivity_range.witness_min, sensitivity_range.witness_max):
            check = verify_bundle(net, cs, witness, ifc)
            assert check.ok
            assert check.q_if == pytest.approx(witness.achieved_q_if, abs=1e-9)

    def test_infeasible_base_raises(self, lv_case):
        net, ifc, _ = lv_case
        # no tap or setpoint can pull every bus into a 1 mpu band
        cs = ConstraintSet.from_network(net, v_min=0.9995, v_max=1.0005)
        with pytest.raises(Infeasible) as exc:
            flex_range_sensitivity(net, ifc, cs)
        assert exc.value.violations


@pytest.mark.slow
class TestOracle:
    def test_oracle_brackets_base(self, lv_case, base_q):
        flex = flex_range_oracle(*lv_case, grid_resolution=5)
        assert flex.feasible
        assert flex.evaluated == 5 * 5 * 5
        assert flex.q_min <= base_q <= flex.q_max
        assert flex.grid_step > 0.0

    def test_oracle_witnesses_verify(self, lv_case):
        net, ifc, cs = lv_case
        flex = flex_range_oracle(net, ifc, cs, grid_resolution=3)
        assert verify_bundle(net, cs, flex.witness_max, ifc).ok
        assert verify_bundle(net, cs, flex.witness_min, ifc).ok

    def test_parallel_matches_serial(self, lv_case):
        serial = flex_range_oracle(*lv_case, grid_resolution=3)
        parallel = flex_range_oracle(*lv_case, grid_resolution=3, workers=2)
        assert (parallel.q_min, parallel.q_max) == (serial.q_min, serial.q_max)

    def test_too_large(self):
        net = build_fixture_feeder()
        with pytest.raises(OracleTooLarge):
            flex_range_oracle(net, interface_of(net, "T_HVMV"), ConstraintSet.from_network(net))


class TestAllocate:
    def test_reachable_target(self, lv_case, sensitivity_range, base_q):
        net, ifc, cs = lv_case
        target = base_q + 0.25 * (sensitivity_range.q_max - base_q)
        bundle = allocate_setpoints(net, ifc, cs, target)
        assert abs(bundle.deviation) < 1e-4
        assert bundle.deviation == pytest.approx(target - bundle.achieved_q_if)
        assert verify_bundle(net, cs, bundle, ifc).ok

    def test_target_beyond_range(self, lv_case, sensitivity_range):
        net, ifc, cs = lv_case
        target = sensitivity_range.q_max + 0.01
        bundle = allocate_setpoints(net, ifc, cs, target)
        assert bundle.deviation > 0.009
        assert verify_bundle(net, cs, bundle, ifc).ok

    def test_fixed_taps_respected(self, lv_case, base_q):
        net, ifc, cs = lv_case
        bundle = allocate_setpoints(net, ifc, cs, base_q, fixed_taps={"T1": 1})
        assert bundle.taps["T1"] == 1


class TestTapScan:
    def test_max_uses_best_tap_position(self, lv_case, sensitivity_range):
        net, ifc, cs = lv_case
        # raising T1 lifts the LV voltage so pv1 absorbs more; the best position lies beyond one step
        assert sensitivity_range.q_max >= 0.0050
        assert verify_bundle(net, cs, sensitivity_range.witness_max, ifc).ok

    def test_scan_keeps_q_and_never_worsens(self, lv_case):
        problem = FlexProblem(*lv_case)
        base = problem.base()
        scanned = SensitivitySearch(problem, Objective("max")).tap_scan(base)
        assert scanned.feasible
        assert scanned.q == base.q
        assert scanned.q_if >= base.q_if

    def test_scan_without_better_position_returns_start(self, lv_case):
        net, ifc, _ = lv_case
        problem = FlexProblem(net, ifc, ConstraintSet.from_network(net, tap_decisions=()))
        base = problem.base()
        assert SensitivitySearch(problem, Objective("max")).tap_scan(base) is base

    def test_sensitivities_once_per_operating_point(self, lv_case):
        problem = FlexProblem(*lv_case)
        base = problem.base()
        with patch("src.optimization.search.sensitivities", wraps=sensitivities) as computed:
            first = problem.sensitivities_at(base)
            again = problem.sensitivities_at(problem.evaluate(base.q))
        assert first is again
        assert computed.call_count == 1


@pytest.fixture
def der_net():
    return network_from_dict({
        "s_base_mva": 10.0,
        "buses": [
            {"id": "HV", "kind": "slack", "base_kv": 110.0, "level": "HV", "v_set": 1.0},
            {"id": "MV", "kind": "load", "base_kv": 20.0, "level": "MV"},
        ],
        "transformers": [{"id": "T0", "hv_bus": "HV", "lv_bus": "MV", "s_rated": 10.0, "r": 0.0, "x": 0.12,
                          "is_interface": True}],
        "assets": [{"id": "der", "bus": "MV", "kind": "storage", "p": 0.0, "q_min": -1.0, "q_max": 1.0,
                    "control": {"type": "fallback", "q": 0.0}, "directly_controllable": True}],
    })


def lossless_interface_q(q: float, x: float = 0.12) -> float:
    """Sending-end Q of a lossless reactance feeding a bus that injects q at zero p, slack at 1 pu."""
    v2 = (1.0 + math.sqrt(1.0 + 4.0 * x * q)) / 2.0
    return (1.0 - v2) / x


class TestTwoBusDer:
    def test_oracle_width_matches_hand_power_flow(self, der_net):
        ifc = interface_of(der_net, "T0")
        flex = flex_range_oracle(der_net, ifc, ConstraintSet.from_network(der_net))
        assert flex.witness_min.q_setpoints["der"] == pytest.approx(0.1)
        assert flex.witness_max.q_setpoints["der"] == pytest.approx(-0.1)
        assert flex.q_max == pytest.approx(lossless_interface_q(-0.1), abs=1e-6)
        assert flex.q_min == pytest.approx(lossless_interface_q(0.1), abs=1e-6)
        assert flex.width == pytest.approx(0.2, abs=0.005)

    def test_sensitivity_within_five_percent_of_oracle(self, der_net):
        ifc = interface_of(der_net, "T0")
        cs = ConstraintSet.from_network(der_net)
        oracle = flex_range_oracle(der_net, ifc, cs)
        heuristic = flex_range_sensitivity(der_net, ifc, cs)
        assert abs(heuristic.width - oracle.width) <= 0.05 * oracle.width

    def test_voltage_bound_binds_max(self, der_net):
        ifc = interface_of(der_net, "T0")
        # absorbing at the DER pulls MV down; 0.995 is hit well before q = -0.1
        cs = ConstraintSet.from_network(der_net, bus_overrides={"MV": (0.995, 1.1)})
        flex = flex_range_sensitivity(der_net, ifc, cs)
        check = verify_bundle(der_net, cs, flex.witness_max, ifc)
        assert check.ok
        assert check.solution.voltage("MV") == pytest.approx(0.995, abs=1e-6)
        assert flex.witness_max.q_setpoints["der"] > -0.1
        oracle = flex_range_oracle(der_net, ifc, cs)
        assert oracle.q_max <= flex.q_max + 1e-9


@pytest.mark.slow
class TestOracleComparison:
    def test_sensitivity_sandwiched_by_oracle(self, lv_case):
        oracle = flex_range_oracle(*lv_case)
        heuristic = flex_range_sensitivity(*lv_case)
        assert oracle.q_min - oracle.grid_step <= heuristic.q_min
        assert heuristic.q_max <= oracle.q_max + oracle.grid_step
        assert heuristic.width >= 0.95 * oracle.width
