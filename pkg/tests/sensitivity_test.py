import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from dataclasses import replace

import numpy as np
import pytest
from src.control.characteristics import QofV
from src.control.coupled import coupled_power_flow
from src.grid.network import interface_of
from src.powerflow.sensitivity import sensitivities
from src.powerflow.solver import interface_q, solve_power_flow

H = 1e-5


@pytest.fixture
def base(lv_net):
    dispatch = {a.id: (a.p, 0.0) for a in lv_net.assets}
    return dispatch, solve_power_flow(lv_net, dispatch)


class TestAssetSensitivities:
    def test_matches_finite_differences(self, lv_net, base):
        dispatch, sol = base
        ifc = interface_of(lv_net, "T1")
        sens = sensitivities(lv_net, sol, ifc, tap_ids=(), include_local_control=False)
        assert sens.asset_ids == ("bat2", "pv2")

        moved = dict(dispatch)
        moved["bat2"] = (0.0, H)
        other = solve_power_flow(lv_net, moved)
        k = sens.asset_ids.index("bat2")
        assert np.allclose(sens.dv_dq[:, k], (other.vm - sol.vm) / H, atol=1e-4, rtol=1e-3)
        assert sens.dqif_dq[k] == pytest.approx((interface_q(other, ifc) - interface_q(sol, ifc)) / H,
                                                abs=1e-4, rel=1e-3)

    def test_injection_raises_voltage_and_lowers_import(self, lv_net, base):
        _, sol = base
        sens = sensitivities(lv_net, sol, interface_of(lv_net, "T1"), tap_ids=(), include_local_control=False)
        assert sens.dv("LV2", "bat2") > 0.0
        assert sens.dv("MV0", "bat2") == 0.0
        assert np.all(sens.dqif_dq < 0.0)

    def test_local_control_damps_voltage_response(self, lv_net):
        # a curve without deadband or saturation keeps pv1 on its slope at any operating voltage
        sloped = QofV(((0.8, 1.0), (1.2, -1.0)))
        net = replace(lv_net, assets=tuple(replace(a, control=sloped) if a.id == "pv1" else a for a in lv_net.assets))
        sol = coupled_power_flow(net)
        ifc = interface_of(net, "T1")
        open_loop = sensitivities(net, sol, ifc, tap_ids=(), include_local_control=False)
        closed = sensitivities(net, sol, ifc, tap_ids=())
        assert 0.0 < closed.dv("LV1", "bat2") < open_loop.dv("LV1", "bat2")


class TestTapSensitivities:
    def test_tap_raises_lv_voltages(self, lv_net):
        sol = coupled_power_flow(lv_net)
        sens = sensitivities(lv_net, sol, interface_of(lv_net, "T1"))
        assert sens.tap_ids == ("T1",)
        rows = [sens.bus_ids.index(b) for b in ("LV0", "LV1", "LV2")]
        assert np.all(sens.dv_dtap[rows, 0] > 0.0)
        assert sens.dv_dtap[sens.bus_ids.index("MV0"), 0] == 0.0

    def test_no_interface_skips_q_rows(self, lv_net, base):
        _, sol = base
        sens = sensitivities(lv_net, sol, None, asset_ids=("bat2",))
        assert sens.tap_ids == ()
        assert sens.dqif_dq.tolist() == [0.0]
