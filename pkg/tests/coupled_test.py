import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest
from src.control.characteristics import FallbackProfile, QofV, eval_characteristic
from src.control.coupled import FixedPointDivergence, active_law, coupled_power_flow
from src.grid.grid_io import network_from_dict
from src.powerflow.solver import solve_power_flow


@pytest.fixture
def pv_feeder():
    # resistive line, so active export lifts the far-end voltage into the Q(V) droop
    return network_from_dict({
        "s_base_mva": 10.0,
        "buses": [
            {"id": "B1", "kind": "slack", "base_kv": 20.0, "level": "MV"},
            {"id": "B2", "kind": "load", "base_kv": 20.0, "level": "MV"},
        ],
        "lines": [{"id": "L12", "from_bus": "B1", "to_bus": "B2", "r": 0.1, "x": 0.1, "per_unit": True}],
        "assets": [{"id": "pv", "bus": "B2", "kind": "pv", "p": 5.0, "s_max": 6.0, "control": {"type": "q_of_v"}}],
    })


class TestCoupledPowerFlow:
    def test_fixed_point_is_self_consistent(self, pv_feeder):
        sol = coupled_power_flow(pv_feeder)
        pv = pv_feeder.asset("pv")
        q = sol.dispatch["pv"][1]
        assert q < 0.0
        assert sol.fixed_point_iterations > 1
        assert abs(eval_characteristic(QofV(), sol.voltage("B2"), pv.p, pv.limits) - q) <= 1e-6

    def test_resolving_with_fixed_q_reproduces_voltages(self, pv_feeder):
        sol = coupled_power_flow(pv_feeder)
        again = solve_power_flow(pv_feeder, sol.dispatch)
        assert np.allclose(again.vm, sol.vm, atol=1e-8)

    def test_outer_limit_raises(self, pv_feeder):
        with pytest.raises(FixedPointDivergence) as exc:
            coupled_power_flow(pv_feeder, max_outer=1)
        assert exc.value.iterations == 1

    def test_override_wins_over_law(self, pv_feeder):
        sol = coupled_power_flow(pv_feeder, {"pv": 0.1})
        assert sol.dispatch["pv"] == (0.5, 0.1)
        assert sol.fixed_point_iterations == 1

    def test_override_clamped_to_capability(self, pv_feeder):
        sol = coupled_power_flow(pv_feeder, {"pv": 5.0})
        assert sol.dispatch["pv"][1] == pytest.approx(np.sqrt(0.6 ** 2 - 0.5 ** 2))

    def test_fallback_assets_switch_to_profile(self, lv_net):
        normal = coupled_power_flow(lv_net.with_slack("MV0", 1.06))
        cut_off = coupled_power_flow(lv_net.with_slack("MV0", 1.06), fallback_assets={"pv2"})
        assert normal.dispatch["pv2"][1] == 0.0
        assert cut_off.dispatch["pv2"][1] < 0.0


class TestActiveLaw:
    def test_configured_control(self, lv_net):
        assert isinstance(active_law(lv_net.asset("pv2")), FallbackProfile)

    def test_fallback_profile(self, lv_net):
        assert active_law(lv_net.asset("pv2"), {"pv2"}) == QofV()

    def test_plain_setpoint_falls_back_to_default_curve(self, lv_net):
        assert active_law(lv_net.asset("bat2"), {"bat2"}) == QofV()


class TestWarmStart:
    def test_matches_cold_solve(self, pv_feeder):
        cold = coupled_power_flow(pv_feeder)
        nearby = coupled_power_flow(pv_feeder.with_asset_power({"pv": 0.45}))
        warm = coupled_power_flow(pv_feeder, initial=nearby)
        assert np.allclose(warm.vm, cold.vm, atol=1e-5)
        assert warm.dispatch["pv"][1] == pytest.approx(cold.dispatch["pv"][1], abs=1e-5)

    def test_starting_at_the_fixed_point_needs_one_pass(self, pv_feeder):
        cold = coupled_power_flow(pv_feeder)
        warm = coupled_power_flow(pv_feeder, initial=cold)
        assert warm.fixed_point_iterations <= 2
        assert warm.fixed_point_iterations < cold.fixed_point_iterations
