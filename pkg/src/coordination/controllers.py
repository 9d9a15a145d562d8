"""
Controller state machines of the coordination hierarchy and the actuator endpoints they command.

Every node talks to the others only through the message bus it is given; the scenario runner
advances all nodes with begin_step, message delivery and end_step.
"""
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional

from src.grid.network import Network, interface_of, subtree_buses
from src.optimization.constraints import ConstraintSet
from src.optimization.decomposition import FlexCache, substation_transformers
from src.coordination.messages import (
    Ack,
    FlexibilityReport,
    Heartbeat,
    MeasurementReport,
    Message,
    Payload,
    QTarget,
    SetpointCommand,
)
from src.coordination.protocol import (
    Assessment,
    ControllerState,
    EdgeDecision,
    LocalMeasurements,
    Mode,
    Role,
    StaleData,
    Step4Result,
    assess_flexibility,
    central_step4,
    edge_cascade,
    edge_node,
    fallback_transition,
    upstream_step2_3,
)

logger = logging.getLogger(__name__)

UPSTREAM_NODE = "upstream"
CENTRAL_NODE = "central"

DEFAULT_COORDINATION: Dict[str, Any] = {
    "cycle_steps": 1,
    "heartbeat_period": 1,
    "fallback_threshold": 3,
    "target_validity_cycles": 2,
    "fallback_strategy": "edge_optimisation",
}
FALLBACK_STRATEGIES = ("edge_optimisation", "profile")


def coordination_settings(config: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    settings = dict(DEFAULT_COORDINATION)
    settings.update((config or {}).get("coordination", {}))
    if settings["fallback_strategy"] not in FALLBACK_STRATEGIES:
        raise ValueError(f"Unknown fallback strategy '{settings['fallback_strategy']}', "
                         f"expected one of {FALLBACK_STRATEGIES}")
    return settings


def method_options(config: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    """Keyword arguments for the flexibility methods from the `optimisation` config section."""
    section = (config or {}).get("optimisation", {})
    keys = {"heuristic_max_iter": "max_iter", "heuristic_tol": "tol",
            "initial_step_fraction": "initial_step_fraction", "oracle_grid_points": "grid_resolution"}
    return {keys[k]: v for k, v in section.items() if k in keys}


@dataclass(frozen=True)
class Observation:
    """Grid state as measured at the start of a step."""

    measured_at: int
    p: Dict[str, float]
    taps: Dict[str, int]
    voltages: Dict[str, float]
    p_if: Dict[str, float] = field(default_factory=dict)
    q_if: Dict[str, float] = field(default_factory=dict)
    load_q: Dict[str, float] = field(default_factory=dict)


class Node:
    """
    Common message handling: sequence numbers, heartbeats and the event list.

    Args:
        node_id: Id on the message bus
        bus: Message bus used for every send
    """

    def __init__(self, node_id: str, bus: Any):
        self.node_id = node_id
        self.bus = bus
        self.events: List[Dict[str, Any]] = []
        self._seq = 0
        self._last_seq: Dict[str, int] = {}

    def send(self, receiver: str, payload: Payload, now: int) -> Message:
        self._seq += 1
        msg = Message(self.node_id, receiver, now, payload, self._seq)
        self.bus.send(msg, now)
        return msg

    def receive(self, msg: Message, now: int) -> None:
        """Handle a delivered message once; repeated or older sequence numbers are ignored."""
        if msg.seq <= self._last_seq.get(msg.sender, 0):
            logger.debug(f"{self.node_id} ignores stale {msg.kind} seq {msg.seq} from {msg.sender}")
            return
        self._last_seq[msg.sender] = msg.seq
        self.handle(msg, now)

    def handle(self, msg: Message, now: int) -> None:
        pass

    def event(self, now: int, kind: str, detail: str) -> None:
        self.events.append({"step": now, "node": self.node_id, "kind": kind, "detail": detail})


class Controller(Node):
    """Coordination node with a ControllerState and periodic heartbeats to its peers."""

    role: Role

    def __init__(self, node_id: str, config: Optional[Mapping[str, Any]], bus: Any, peers: List[str]):
        super().__init__(node_id, bus)
        self.config = dict(config or {})
        self.settings = coordination_settings(self.config)
        self.peers = list(peers)
        # peers count as alive at start-up
        self.state = ControllerState(self.role, node_id, last_heartbeat_rx={p: 0 for p in self.peers})

    @property
    def mode(self) -> Mode:
        return self.state.mode

    @property
    def fallback_threshold(self) -> int:
        return self.settings["fallback_threshold"] * self.settings["heartbeat_period"]

    @property
    def validity(self) -> int:
        return self.settings["target_validity_cycles"] * self.settings["cycle_steps"]

    def is_cycle(self, now: int) -> bool:
        return now % self.settings["cycle_steps"] == 0

    def send_heartbeats(self, now: int) -> None:
        if now % self.settings["heartbeat_period"] == 0:
            for peer in self.peers:
                self.send(peer, Heartbeat(), now)

    def receive(self, msg: Message, now: int) -> None:
        if isinstance(msg.payload, Heartbeat) and msg.seq > self._last_seq.get(msg.sender, 0):
            rx = dict(self.state.last_heartbeat_rx)
            rx[msg.sender] = now
            self.state = replace(self.state, last_heartbeat_rx=rx)
        super().receive(msg, now)

    def begin_step(self, now: int, observation: Observation) -> None:
        self.send_heartbeats(now)

    def end_step(self, now: int) -> None:
        pass


class UpstreamController(Controller):
    """
    Stand-in for the EHV/HV controller: clamps the TSO request into the reported range.

    Args:
        config: Run configuration
        bus: Message bus
    """

    role = Role.UPSTREAM

    def __init__(self, config: Optional[Mapping[str, Any]], bus: Any):
        super().__init__(UPSTREAM_NODE, config, bus, [CENTRAL_NODE])
        self.request_q: Optional[float] = None
        self.last_target: Optional[QTarget] = None

    def set_request(self, q: float, now: int) -> None:
        logger.info(f"TSO reactive power request at t={now}: {q:.5f} pu")
        self.request_q = float(q)
        self.event(now, "tso_q_request", f"{q:.6f}")

    def handle(self, msg: Message, now: int) -> None:
        if not isinstance(msg.payload, FlexibilityReport):
            return
        reports = dict(self.state.cached_reports)
        reports[msg.payload.interface] = msg.payload
        self.state = replace(self.state, cached_reports=reports)
        if self.request_q is None:
            return
        decision = upstream_step2_3(list(reports.values()), self.request_q, now, now + self.validity)
        if decision.alarm:
            self.event(now, "alarm", decision.alarm)
            return
        for target in decision.targets:
            self.last_target = target
            self.state = replace(self.state, pending_target=target)
            self.send(msg.sender, target, now)


class CentralController(Controller):
    """
    Central controller of one HV/MV interface: flexibility assessment and target allocation.

    Its view of the grid combines its own MV measurements with the last report of every edge.

    Args:
        config: Run configuration
        bus: Message bus
        network: Grid model
        interface_id: HV/MV interface transformer
        cs: Constraint set of the whole grid
    """

    role = Role.CENTRAL

    def __init__(self, config: Optional[Mapping[str, Any]], bus: Any, network: Network, interface_id: str,
                 cs: ConstraintSet):
        self.network = network
        self.ifc = interface_of(network, interface_id)
        self.cs = cs
        self.substations = substation_transformers(network, self.ifc)
        super().__init__(CENTRAL_NODE, config, bus, [UPSTREAM_NODE] + [edge_node(t) for t in self.substations])
        lv = set().union(*(subtree_buses(network, t) for t in self.substations))
        self.mv_assets = [a.id for a in network.assets if a.bus not in lv]
        self.known_p = {a.id: a.p for a in network.assets}
        self.known_q: Dict[str, float] = {}
        self.known_taps = dict(network.taps)
        self.measured_at: Dict[str, int] = {}
        self.edge_deviation: Dict[str, float] = {}
        self.flex_cache = FlexCache()
        self.assessment: Optional[Assessment] = None
        self.assessed_at: Optional[int] = None
        self.last_target: Optional[QTarget] = None
        self.last_step4: Optional[Step4Result] = None
        self.acks = 0

    @property
    def coupling(self) -> Dict[str, Any]:
        return dict(self.config.get("coupling", {}))

    @property
    def method(self) -> str:
        return self.config.get("optimisation", {}).get("method", "sensitivity")

    def update_model(self, network: Network, cs: ConstraintSet) -> None:
        """Take over changed asset limits or tap decisions; measured powers are kept."""
        self.network = network
        self.cs = cs
        self.flex_cache.clear()

    def net_view(self) -> Network:
        return self.network.with_asset_power(self.known_p, self.known_q).with_taps(self.known_taps)

    def unreachable(self, now: int) -> List[str]:
        return [t for t in self.substations if self.state.staleness(edge_node(t), now) >= self.fallback_threshold]

    def begin_step(self, now: int, observation: Observation) -> None:
        super().begin_step(now, observation)
        for a in self.mv_assets:
            if a in observation.p:
                self.known_p[a] = observation.p[a]
            if a in observation.load_q:
                self.known_q[a] = observation.load_q[a]
        for tid, pos in observation.taps.items():
            if tid not in self.substations:
                self.known_taps[tid] = pos
        self.measured_at["scada"] = observation.measured_at
        if self.is_cycle(now):
            self.step1(now)

    def step1(self, now: int) -> Optional[FlexibilityReport]:
        try:
            self.assessment = assess_flexibility(
                self.net_view(), self.ifc, self.cs, now=now, measured_at=self.measured_at,
                max_age=self.fallback_threshold, coupling=self.coupling, method=self.method,
                cache=self.flex_cache, **method_options(self.config),
            )
        except StaleData as e:
            logger.warning(f"Step 1 skipped at t={now}: {e}")
            self.event(now, "stale_data", str(e))
            self.assessment = None
            return None
        self.assessed_at = now
        report = self.assessment.report
        if not report.feasible:
            self.event(now, "infeasible", f"no feasible operating point at {self.ifc.transformer_id}")
        self.send(UPSTREAM_NODE, report, now)
        return report

    def handle(self, msg: Message, now: int) -> None:
        payload = msg.payload
        if isinstance(payload, MeasurementReport):
            self.known_p.update(payload.asset_p)
            self.known_taps.update(payload.taps)
            self.measured_at[msg.sender] = payload.measured_at
            self.edge_deviation[msg.sender] = payload.deviation
        elif isinstance(payload, QTarget):
            self.step4(payload, now)
        elif isinstance(payload, Ack):
            self.acks += 1

    def step4(self, target: QTarget, now: int) -> Optional[Step4Result]:
        if target.valid_until < now:
            logger.info(f"Discarding target that expired at t={target.valid_until}")
            return None
        self.last_target = target
        self.state = replace(self.state, pending_target=target)
        decomposition = None
        if self.assessment is not None and self.assessed_at == now:
            decomposition = self.assessment.decomposition
        result = central_step4(target, self.net_view(), self.cs, now, decomposition, self.unreachable(now),
                               now + self.validity, self.coupling)
        if result.fallback:
            self.event(now, "fallback_directive", f"allocation of {target.q_target:.6f} infeasible")
        for receiver, command in result.commands:
            self.send(receiver, command, now)
        self.last_step4 = result
        return result


class EdgeController(Controller):
    """
    Edge agent of one MV/LV substation.

    Args:
        config: Run configuration
        bus: Message bus
        network: Grid model containing the substation
        transformer_id: The MV/LV interface transformer
        cs: Constraint set of the whole grid
    """

    role = Role.EDGE

    def __init__(self, config: Optional[Mapping[str, Any]], bus: Any, network: Network, transformer_id: str,
                 cs: ConstraintSet):
        super().__init__(edge_node(transformer_id), config, bus, [CENTRAL_NODE])
        self.transformer_id = transformer_id
        self.mv_bus = network.transformer(transformer_id).hv_bus
        self.update_model(network, cs)
        self.measurements: Optional[LocalMeasurements] = None
        self.decision: Optional[EdgeDecision] = None

    def update_model(self, network: Network, cs: ConstraintSet) -> None:
        """Rebuild the local model; the own tap is a decision only if cs makes it one."""
        lv = subtree_buses(network, self.transformer_id)
        local = network.subnetwork(set(lv) | {self.mv_bus}, self.mv_bus, 1.0)
        self.local_net = replace(local, assets=tuple(a for a in local.assets if a.bus != self.mv_bus))
        self.lv_cs = cs.restricted(self.local_net)
        self.asset_ids = [a.id for a in self.local_net.assets if a.directly_controllable]
        self.lv_assets = [a.id for a in self.local_net.assets]

    @property
    def coupling(self) -> Dict[str, Any]:
        return dict(self.config.get("coupling", {}))

    @property
    def tap_setpoint(self) -> Optional[int]:
        """Commanded own tap position; None hands the tap to its automaton."""
        if self.decision is None or self.decision.local:
            return None
        return self.decision.taps.get(self.transformer_id)

    def measure(self, observation: Observation) -> LocalMeasurements:
        return LocalMeasurements(
            measured_at=observation.measured_at,
            mv_voltage=observation.voltages.get(self.mv_bus, 1.0),
            q_if=observation.q_if.get(self.transformer_id, 0.0),
            asset_p={a: observation.p[a] for a in self.lv_assets if a in observation.p},
            tap_position=observation.taps.get(self.transformer_id),
        )

    def begin_step(self, now: int, observation: Observation) -> None:
        super().begin_step(now, observation)
        self.measurements = self.measure(observation)
        m = self.measurements
        report = MeasurementReport(
            measured_at=m.measured_at,
            interface=self.transformer_id,
            p_if=observation.p_if.get(self.transformer_id, 0.0),
            q_if=m.q_if,
            voltages={b: v for b, v in observation.voltages.items() if b in self.local_net.bus_index},
            asset_p=dict(m.asset_p),
            taps={self.transformer_id: m.tap_position} if m.tap_position is not None else {},
            deviation=self.decision.deviation if self.decision is not None else 0.0,
        )
        self.send(CENTRAL_NODE, report, now)
        cmd = self.state.last_command
        if self.mode is Mode.FALLBACK and self.settings["fallback_strategy"] == "profile":
            self.apply(EdgeDecision(None, {}, m.q_if), None, now)
        elif self.mode is Mode.FALLBACK or (cmd is not None and cmd.valid_until < now):
            # an expired command yields a local decision
            self.run_cascade(now)

    def handle(self, msg: Message, now: int) -> None:
        if not isinstance(msg.payload, SetpointCommand):
            return
        cmd = msg.payload
        self.state = replace(self.state, last_command=cmd, last_command_rx=now)
        if cmd.fallback:
            self.event(now, "fallback_directive", f"received from {msg.sender}")
        self.run_cascade(now)

    def run_cascade(self, now: int) -> EdgeDecision:
        if self.measurements is None:
            raise RuntimeError(f"{self.node_id} has no measurements yet")
        decision = edge_cascade(self.state, self.state.last_command, self.measurements, self.lv_cs,
                                self.local_net, self.transformer_id, now, self.coupling)
        if decision.infeasible:
            self.event(now, "local_infeasible", f"deviation {decision.deviation:.6f}")
        self.apply(decision, self.state.last_command, now)
        return decision

    def apply(self, decision: EdgeDecision, cmd: Optional[SetpointCommand], now: int) -> None:
        was_local = self.decision is None or self.decision.local
        self.decision = decision
        if decision.local:
            if not was_local:
                logger.info(f"{self.node_id} hands taps and assets to local control at t={now}")
                for a in self.asset_ids:
                    self.send(a, SetpointCommand(a, now, fallback=True), now)
            return
        valid_until = cmd.valid_until if cmd is not None else now
        for a, q in decision.setpoints.items():
            self.send(a, SetpointCommand(a, valid_until, q=q), now)

    def end_step(self, now: int) -> None:
        before = self.state.mode
        self.state = fallback_transition(self.state, now, CENTRAL_NODE, self.fallback_threshold)
        if self.state.mode is not before:
            self.event(now, "mode", self.state.mode.value)


class AssetEndpoint(Node):
    """
    Receiving end of a directly controllable asset.

    Holds the last setpoint until its validity runs out; without a valid setpoint the asset
    follows its fallback law.
    """

    def __init__(self, asset_id: str, bus: Any, node_id: Optional[str] = None):
        super().__init__(node_id or asset_id, bus)
        self.asset_id = asset_id
        self.command: Optional[SetpointCommand] = None

    def handle(self, msg: Message, now: int) -> None:
        if isinstance(msg.payload, SetpointCommand):
            self.command = msg.payload
            self.send(msg.sender, Ack(msg.seq), now)

    def valid(self, now: int) -> bool:
        return self.command is not None and not self.command.fallback and self.command.valid_until >= now

    def setpoint(self, now: int) -> Optional[float]:
        """Commanded q, or None when the asset is on its fallback law."""
        if not self.valid(now) or self.command.q is None:
            return None
        q = self.command.q
        return q if math.isfinite(q) else None


class TapEndpoint(AssetEndpoint):
    """Actuator of a tap changer positioned by the central controller."""

    def __init__(self, transformer_id: str, bus: Any, node_id: str):
        super().__init__(transformer_id, bus, node_id)

    def position(self, now: int) -> Optional[int]:
        if not self.valid(now):
            return None
        return self.command.taps.get(self.asset_id)
