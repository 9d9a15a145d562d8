import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from dataclasses import replace

import pytest
from unittest.mock import Mock
from src.control.coupled import coupled_power_flow
from src.control.oltc import OltcState, initial_states, oltc_step, run_oltc_to_quiescence


def voltage_model(fn):
    """solve() stand-in whose LV voltage depends only on the T1 position."""
    def solve(taps):
        sol = Mock()
        sol.voltage.side_effect = lambda bus: fn(taps["T1"])
        return sol
    return Mock(side_effect=solve)


@pytest.fixture
def tc(lv_net):
    return lv_net.transformer("T1").tap


class TestOltcStep:
    def test_inside_deadband(self, tc):
        state, delta = oltc_step(OltcState(0), tc, 1.01)
        assert delta == 0
        assert state == OltcState(0)

    def test_low_voltage_raises_tap(self, tc):
        state, delta = oltc_step(OltcState(0), tc, 0.95)
        assert delta == 1
        assert state.position == 1

    def test_high_voltage_lowers_tap(self, tc):
        state, delta = oltc_step(OltcState(0), tc, 1.05)
        assert delta == -1
        assert state.position == -1

    def test_delay_counts_consecutive_violations(self, tc):
        slow = replace(tc, delay_steps=2)
        state, delta = oltc_step(OltcState(0), slow, 0.95)
        assert (delta, state.violation_counter) == (0, 1)
        state, delta = oltc_step(state, slow, 0.95)
        assert delta == 1

    def test_side_change_resets_counter(self, tc):
        slow = replace(tc, delay_steps=2)
        state, delta = oltc_step(OltcState(0, 1, 1), slow, 1.05)
        assert delta == 0
        assert (state.violation_counter, state.side) == (1, -1)

    def test_saturation(self, tc):
        state, delta = oltc_step(OltcState(2), tc, 0.9)
        assert delta == 0
        assert state.saturated
        assert state.position == 2


class TestQuiescence:
    def test_settles_inside_deadband(self, lv_net):
        solve = voltage_model(lambda tap: 0.95 + 0.02 * tap)
        result = run_oltc_to_quiescence(lv_net, solve, initial_states(lv_net))
        assert result.quiescent
        assert not result.oscillation
        assert result.taps == {"T1": 2}
        assert result.moves == 2
        assert result.iterations == 3
        assert solve.call_count == 3

    def test_oscillation_holds_second_position(self, lv_net):
        solve = voltage_model(lambda tap: 0.975 + 0.05 * tap)
        result = run_oltc_to_quiescence(lv_net, solve, initial_states(lv_net))
        assert result.oscillation
        assert result.taps == {"T1": 1}
        assert result.states["T1"].position == 1
        assert result.moves == 2

    def test_saturated_changer_reported(self, lv_net):
        solve = voltage_model(lambda tap: 0.9)
        result = run_oltc_to_quiescence(lv_net, solve, initial_states(lv_net))
        assert result.quiescent
        assert result.taps == {"T1": 2}
        assert result.saturated == ["T1"]

    def test_manual_changer_not_moved(self, lv_net):
        solve = voltage_model(lambda tap: 0.9)
        result = run_oltc_to_quiescence(lv_net, solve, initial_states(lv_net), automatic=[], taps={"T1": -1})
        assert result.taps == {"T1": -1}
        assert result.moves == 0
        assert result.iterations == 1

    def test_iteration_limit(self, lv_net):
        solve = voltage_model(lambda tap: 0.9)
        result = run_oltc_to_quiescence(lv_net, solve, initial_states(lv_net), max_iterations=1)
        assert not result.quiescent
        assert result.taps == {"T1": 1}

    def test_real_power_flow(self, lv_net):
        net = lv_net.with_slack("MV0", 0.95)
        result = run_oltc_to_quiescence(net, lambda taps: coupled_power_flow(net, taps=taps), initial_states(net))
        assert result.taps["T1"] > 0
        assert result.quiescent
