import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import math

import pytest
from unittest.mock import Mock
from src.control.coupled import coupled_power_flow
from src.coordination.controllers import (
    CENTRAL_NODE,
    UPSTREAM_NODE,
    AssetEndpoint,
    CentralController,
    EdgeController,
    Observation,
    TapEndpoint,
    UpstreamController,
    coordination_settings,
    method_options,
)
from src.coordination.messages import Ack, FlexibilityReport, Heartbeat, Message, QTarget, SetpointCommand
from src.coordination.protocol import Mode
from src.grid.network import interface_of
from src.optimization.constraints import ConstraintSet
from src.powerflow.solver import interface_q


@pytest.fixture
def bus():
    return Mock()


def sent(bus):
    return [call.args[0] for call in bus.send.call_args_list]


@pytest.fixture
def observation(mv_net):
    sol = coupled_power_flow(mv_net)
    ifc = interface_of(mv_net, "T1")
    return Observation(
        measured_at=0,
        p={a.id: a.p for a in mv_net.assets},
        taps=dict(mv_net.taps),
        voltages=sol.voltages(),
        q_if={"T1": interface_q(sol, ifc)},
    )


class TestSettings:
    def test_defaults(self):
        settings = coordination_settings({})
        assert settings["fallback_threshold"] == 3
        assert settings["fallback_strategy"] == "edge_optimisation"

    def test_unknown_strategy(self):
        with pytest.raises(ValueError, match="fallback strategy"):
            coordination_settings({"coordination": {"fallback_strategy": "panic"}})

    def test_method_options(self):
        config = {"optimisation": {"method": "oracle", "oracle_grid_points": 11, "heuristic_tol": 1e-4}}
        assert method_options(config) == {"grid_resolution": 11, "tol": 1e-4}


class TestUpstreamController:
    def test_report_without_request_is_cached(self, bus):
        upstream = UpstreamController({}, bus)
        upstream.receive(Message(CENTRAL_NODE, UPSTREAM_NODE, 0, FlexibilityReport("T0", -0.1, 0.2), 1), 0)
        assert "T0" in upstream.state.cached_reports
        bus.send.assert_not_called()

    def test_target_sent_to_reporter(self, bus):
        upstream = UpstreamController({}, bus)
        upstream.set_request(0.5, 2)
        upstream.receive(Message(CENTRAL_NODE, UPSTREAM_NODE, 3, FlexibilityReport("T0", -0.1, 0.2), 1), 3)
        [msg] = sent(bus)
        assert msg.receiver == CENTRAL_NODE
        assert msg.payload == QTarget("T0", 0.2, 5)
        assert upstream.events[0]["kind"] == "tso_q_request"

    def test_infeasible_report_raises_alarm(self, bus):
        upstream = UpstreamController({}, bus)
        upstream.set_request(0.1, 0)
        report = FlexibilityReport("T0", math.nan, math.nan, feasible=False)
        upstream.receive(Message(CENTRAL_NODE, UPSTREAM_NODE, 1, report, 1), 1)
        bus.send.assert_not_called()
        assert upstream.events[-1]["kind"] == "alarm"

    def test_duplicate_message_ignored(self, bus):
        upstream = UpstreamController({}, bus)
        upstream.set_request(0.1, 0)
        msg = Message(CENTRAL_NODE, UPSTREAM_NODE, 1, FlexibilityReport("T0", -0.1, 0.2), 4)
        upstream.receive(msg, 1)
        upstream.receive(msg, 2)
        assert bus.send.call_count == 1


class TestHeartbeats:
    def test_heartbeats_sent_to_peers(self, bus):
        upstream = UpstreamController({}, bus)
        upstream.send_heartbeats(0)
        [msg] = sent(bus)
        assert (msg.receiver, msg.payload, msg.seq) == (CENTRAL_NODE, Heartbeat(), 1)

    def test_heartbeat_period(self, bus):
        upstream = UpstreamController({"coordination": {"heartbeat_period": 2}}, bus)
        upstream.send_heartbeats(1)
        bus.send.assert_not_called()

    def test_heartbeat_refreshes_peer(self, bus):
        upstream = UpstreamController({}, bus)
        upstream.receive(Message(CENTRAL_NODE, UPSTREAM_NODE, 4, Heartbeat(), 1), 4)
        assert upstream.state.last_heartbeat_rx[CENTRAL_NODE] == 4


class TestCentralController:
    def test_topology(self, bus, mv_net):
        central = CentralController({}, bus, mv_net, "T0", ConstraintSet.from_network(mv_net))
        assert central.substations == ["T1", "T2"]
        assert central.peers == [UPSTREAM_NODE, "edge:T1", "edge:T2"]
        assert set(central.mv_assets) == {"storage_mv1", "pv_mv2", "com2"}

    def test_unreachable_edges(self, bus, mv_net):
        central = CentralController({}, bus, mv_net, "T0", ConstraintSet.from_network(mv_net))
        assert central.unreachable(2) == []
        central.receive(Message("edge:T2", CENTRAL_NODE, 2, Heartbeat(), 1), 2)
        assert central.unreachable(3) == ["T1"]

    def test_ack_counted(self, bus, mv_net):
        central = CentralController({}, bus, mv_net, "T0", ConstraintSet.from_network(mv_net))
        central.receive(Message("storage_mv1", CENTRAL_NODE, 1, Ack(3), 1), 1)
        assert central.acks == 1

    def test_expired_target_discarded(self, bus, mv_net):
        central = CentralController({}, bus, mv_net, "T0", ConstraintSet.from_network(mv_net))
        assert central.step4(QTarget("T0", 0.0, 1), 2) is None
        bus.send.assert_not_called()


class TestEdgeController:
    def test_enters_fallback_without_heartbeats(self, bus, mv_net):
        edge = EdgeController({}, bus, mv_net, "T1", ConstraintSet.from_network(mv_net))
        edge.end_step(2)
        assert edge.mode is Mode.COORDINATED
        edge.end_step(3)
        assert edge.mode is Mode.FALLBACK
        assert edge.events[-1] == {"step": 3, "node": "edge:T1", "kind": "mode", "detail": "fallback"}

    def test_local_model(self, bus, mv_net):
        edge = EdgeController({}, bus, mv_net, "T1", ConstraintSet.from_network(mv_net))
        assert edge.local_net.slack_bus.id == "MV1"
        assert edge.asset_ids == ["bat_lv1"]
        assert edge.tap_setpoint is None

    def test_reports_measurements(self, bus, mv_net, observation):
        edge = EdgeController({}, bus, mv_net, "T1", ConstraintSet.from_network(mv_net))
        edge.begin_step(0, observation)
        report = next(m.payload for m in sent(bus) if m.receiver == CENTRAL_NODE and m.kind.value == "MeasurementReport")
        assert report.interface == "T1"
        assert report.taps == {"T1": 0}
        assert set(report.asset_p) == {"hh1", "pv_lv1", "bat_lv1"}

    def test_command_dispatched_to_assets(self, bus, mv_net, observation):
        edge = EdgeController({}, bus, mv_net, "T1", ConstraintSet.from_network(mv_net))
        edge.begin_step(0, observation)
        bus.reset_mock()
        command = SetpointCommand("T1", 2, substation_q=observation.q_if["T1"])
        edge.receive(Message(CENTRAL_NODE, edge.node_id, 0, command, 1), 0)
        assert edge.tap_setpoint == 0
        [msg] = sent(bus)
        assert msg.receiver == "bat_lv1"
        assert msg.payload.valid_until == 2

    def test_fallback_directive_returns_control(self, bus, mv_net, observation):
        edge = EdgeController({}, bus, mv_net, "T1", ConstraintSet.from_network(mv_net))
        edge.begin_step(0, observation)
        edge.receive(Message(CENTRAL_NODE, edge.node_id, 0,
                             SetpointCommand("T1", 2, substation_q=observation.q_if["T1"]), 1), 0)
        bus.reset_mock()
        edge.receive(Message(CENTRAL_NODE, edge.node_id, 1, SetpointCommand("T1", 3, fallback=True), 2), 1)
        assert edge.tap_setpoint is None
        [msg] = sent(bus)
        assert msg.payload.fallback
        assert edge.events[-1]["kind"] == "fallback_directive"


class TestEndpoints:
    def test_asset_endpoint(self, bus):
        endpoint = AssetEndpoint("bat_lv1", bus)
        endpoint.receive(Message("edge:T1", "bat_lv1", 0, SetpointCommand("bat_lv1", 2, q=0.001), 7), 0)
        [ack] = sent(bus)
        assert ack.payload == Ack(7)
        assert endpoint.setpoint(2) == 0.001
        assert endpoint.setpoint(3) is None

    def test_fallback_command(self, bus):
        endpoint = AssetEndpoint("bat_lv1", bus)
        endpoint.receive(Message("edge:T1", "bat_lv1", 0, SetpointCommand("bat_lv1", 5, fallback=True), 1), 0)
        assert endpoint.setpoint(1) is None

    def test_tap_endpoint(self, bus):
        endpoint = TapEndpoint("T0", bus, "tap:T0")
        assert endpoint.position(0) is None
        endpoint.receive(Message(CENTRAL_NODE, "tap:T0", 0, SetpointCommand("T0", 1, taps={"T0": 3}), 1), 0)
        assert endpoint.position(1) == 3
        assert endpoint.position(2) is None
