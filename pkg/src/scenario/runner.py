"""
Quasi-static time-series runner binding grid, controllers, message bus and physics.

Within a step the order is fixed: profiles and events, controller logic with message delivery,
actuation, physics (coupled power flow with the tap automata run to quiescence), recording.
"""
import logging
from typing import Any, Dict, List, Mapping, Optional, Tuple

from src.comms.bus import LinkModel, MessageBus
from src.control.coupled import coupled_power_flow
from src.control.oltc import OltcState, initial_states, run_oltc_to_quiescence
from src.grid.network import Network, interface_of
from src.optimization.constraints import ConstraintSet, check_constraints
from src.powerflow.solver import PowerFlowError, PowerFlowOptions, PowerFlowSolution, interface_p, interface_q
from src.coordination.controllers import (
    CENTRAL_NODE,
    UPSTREAM_NODE,
    AssetEndpoint,
    CentralController,
    EdgeController,
    Node,
    Observation,
    TapEndpoint,
    UpstreamController,
)
from src.coordination.protocol import tap_node
from src.scenario.results import ResultLog, StepRecord
from src.scenario.scenario import EventKind, Scenario, ScenarioError

logger = logging.getLogger(__name__)

DEFAULT_SIMULATION: Dict[str, Any] = {
    "oltc_max_iterations": 20,
    "message_rounds": 8,
}


def merged_config(sc: Scenario, config: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """Run configuration with the scenario's coordination/simulation overrides applied."""
    merged = {k: dict(v) if isinstance(v, dict) else v for k, v in (config or {}).items()}
    for section, values in sc.settings.items():
        merged.setdefault(section, {}).update(values)
    simulation = dict(DEFAULT_SIMULATION)
    simulation.update(merged.get("simulation", {}))
    merged["simulation"] = simulation
    return merged


def scenario_constraints(sc: Scenario, net: Network, tap_modes: Mapping[str, str]) -> ConstraintSet:
    overrides = {b: tuple(v) for b, v in sc.constraints.get("bus_overrides", {}).items()}
    decisions = [t for t, mode in tap_modes.items() if mode == "optimiser"]
    return ConstraintSet.from_network(net, decisions, sc.constraints.get("v_min"), sc.constraints.get("v_max"),
                                      overrides)


class ScenarioRun:
    """
    State of one run: the physical grid, every node on the bus and the tap automata.

    Args:
        sc: Scenario
        config: Run configuration (the JSON config file as a dict)
    """

    def __init__(self, sc: Scenario, config: Optional[Mapping[str, Any]] = None):
        self.sc = sc
        self.config = merged_config(sc, config)
        self.coupling = dict(self.config.get("coupling", {}))
        pf = self.config.get("power_flow", {})
        self.pf_opts = PowerFlowOptions(tol=pf.get("tol", 1e-8), max_iter=pf.get("max_iter", 50))
        self.interface_id = sc.resolve_interface()
        self.limits: Dict[str, Tuple[float, float]] = {}
        self.tap_modes = {t: sc.tap_mode(t) for t in sc.network.tap_changers}
        self.cs = scenario_constraints(sc, sc.network, self.tap_modes)

        self.bus = MessageBus(seed=sc.seed)
        self.upstream = UpstreamController(self.config, self.bus)
        self.central = CentralController(self.config, self.bus, sc.network, self.interface_id, self.cs)
        self.edges = [EdgeController(self.config, self.bus, sc.network, t, self.cs) for t in self.central.substations]
        self.assets: Dict[str, AssetEndpoint] = {}
        self.tap_endpoints: Dict[str, TapEndpoint] = {}
        self._wire()

        self.taps = dict(sc.network.taps)
        self.oltc_states: Dict[str, OltcState] = initial_states(sc.network)
        self.solution: Optional[PowerFlowSolution] = None
        self.log = ResultLog(sc.name, sc.seed, sc.step_minutes)

    @property
    def controllers(self) -> List[Any]:
        return [self.upstream, self.central] + self.edges

    @property
    def nodes(self) -> Dict[str, Node]:
        nodes: Dict[str, Node] = {c.node_id: c for c in self.controllers}
        nodes.update(self.assets)
        nodes.update(self.tap_endpoints)
        return nodes

    def _wire(self) -> None:
        comms = self.sc.comms
        latency, drop = comms.get("latency_steps", 0), comms.get("drop_probability", 0.0)
        self.bus.connect(UPSTREAM_NODE, CENTRAL_NODE, latency, drop)
        for a in self.central.mv_assets:
            if self.sc.network.asset(a).directly_controllable:
                self.assets[a] = AssetEndpoint(a, self.bus)
                self.bus.connect(CENTRAL_NODE, a, latency, drop)
        for edge in self.edges:
            self.bus.connect(CENTRAL_NODE, edge.node_id, latency, drop)
            for a in edge.asset_ids:
                self.assets[a] = AssetEndpoint(a, self.bus)
                # substation-local wiring
                self.bus.connect(edge.node_id, a)
        for tid in self.sc.network.tap_changers:
            if tid not in self.central.substations:
                node = tap_node(tid)
                self.tap_endpoints[node] = TapEndpoint(tid, self.bus, node)
                self.bus.connect(CENTRAL_NODE, node, latency, drop)
        for link in comms.get("links", []):
            src, dst = link["from"], link["to"]
            if not self.bus.has_link(src, dst):
                raise ScenarioError(f"Link override {src}->{dst} does not match a wired link")
            current = self.bus.link(src, dst)
            self.bus.add_link(LinkModel(src, dst, link.get("latency_steps", current.latency_steps),
                                        link.get("drop_probability", current.drop_probability)))

    # -- per-step phases ---------------------------------------------------------------

    def physical_network(self, step: int) -> Network:
        net = self.sc.network.with_asset_power(self.sc.p_at(step), self.sc.q_at(step))
        return net.with_asset_limits(self.limits) if self.limits else net

    def apply_events(self, step: int) -> None:
        changed = False
        for e in self.sc.events_at(step):
            if e.kind is EventKind.TSO_Q_REQUEST:
                self.upstream.set_request(e.data["value"] / self.sc.network.s_base, step)
            elif e.kind is EventKind.COMM_PARTITION:
                a, b = e.partition_sets(sorted(self.bus.nodes))
                cut = self.bus.partition(a, b, step, step + e.data["duration"])
                self._event(step, "comm_partition", f"{cut} links cut for {e.data['duration']} steps")
            elif e.kind is EventKind.ASSET_LIMIT_CHANGE:
                s_base = self.sc.network.s_base
                self.limits[e.data["asset"]] = (e.data["q_min"] / s_base, e.data["q_max"] / s_base)
                self._event(step, "asset_limit_change", e.data["asset"])
                changed = True
            elif e.kind is EventKind.TAP_MODE_CHANGE:
                self.tap_modes[e.data["transformer"]] = e.data["mode"]
                self._event(step, "tap_mode_change", f"{e.data['transformer']} -> {e.data['mode']}")
                changed = True
        if changed:
            model = self.sc.network.with_asset_limits(self.limits)
            self.cs = scenario_constraints(self.sc, model, self.tap_modes)
            self.central.update_model(model, self.cs)
            for edge in self.edges:
                edge.update_model(model, self.cs)

    def observe(self, step: int, net: Network) -> Observation:
        """Current injections plus voltages, taps and interface flows of the last solved state."""
        voltages, p_if, q_if = {}, {}, {}
        if self.solution is not None:
            voltages = self.solution.voltages()
            for t in net.transformers:
                if t.is_interface:
                    s_from, _ = self.solution.branch_flow(t.id)
                    p_if[t.id], q_if[t.id] = float(s_from.real), float(s_from.imag)
        load_q = self.sc.q_at(step)
        return Observation(step, {a.id: a.p for a in net.assets}, dict(self.taps), voltages, p_if, q_if, load_q)

    def exchange(self, step: int) -> None:
        nodes = self.nodes
        for _ in range(self.config["simulation"]["message_rounds"]):
            due = self.bus.deliver_due(step)
            if not due:
                return
            for msg in due:
                nodes[msg.receiver].receive(msg, step)
        if self.bus.pending:
            logger.debug(f"Messages still pending after the last round at t={step}")

    def actuation(self, step: int) -> Tuple[Dict[str, float], List[str], Dict[str, int], List[str]]:
        """Setpoint overrides, assets on their fallback law, commanded taps and automatic taps."""
        overrides, fallback = {}, []
        for a, ep in sorted(self.assets.items()):
            q = ep.setpoint(step)
            if q is None:
                fallback.append(a)
            else:
                overrides[a] = q
        commanded, automatic = {}, []
        edge_taps = {e.transformer_id: e for e in self.edges}
        for tid, mode in sorted(self.tap_modes.items()):
            if mode == "fixed":
                continue
            position = None
            if mode == "optimiser":
                if tid in edge_taps:
                    position = edge_taps[tid].tap_setpoint
                else:
                    position = self.tap_endpoints[tap_node(tid)].position(step)
            if position is None:
                automatic.append(tid)
            else:
                commanded[tid] = position
        return overrides, fallback, commanded, automatic

    def physics(self, net: Network, overrides: Dict[str, float], fallback: List[str], commanded: Dict[str, int],
                automatic: List[str]):
        taps = dict(self.taps)
        taps.update(commanded)
        previous = self.solution

        def solve(tap_vector):
            # the last step's state seeds the fixed point
            return coupled_power_flow(net, overrides, tap_vector, fallback, pf_opts=self.pf_opts, initial=previous,
                                      **self.coupling)

        return run_oltc_to_quiescence(net, solve, self.oltc_states, automatic, taps,
                                      self.config["simulation"]["oltc_max_iterations"])

    def step(self, step: int) -> StepRecord:
        self.apply_events(step)
        net = self.physical_network(step)
        observation = self.observe(step, net)
        for c in self.controllers:
            c.begin_step(step, observation)
        self.exchange(step)
        for c in self.controllers:
            c.end_step(step)

        overrides, fallback, commanded, automatic = self.actuation(step)
        record = StepRecord(step=step)
        try:
            result = self.physics(net, overrides, fallback, commanded, automatic)
        except PowerFlowError as e:
            logger.warning(f"Step {step} failed: {e}")
            self._event(step, "power_flow_failed", str(e))
            record.converged, record.error = False, str(e)
            record.taps = {t: int(p) for t, p in self.taps.items()}
        else:
            self.solution, self.taps, self.oltc_states = result.solution, dict(result.taps), dict(result.states)
            if result.oscillation:
                self._event(step, "tap_oscillation", ", ".join(sorted(result.taps)))
            self._record(record, net, result.iterations)

        target = self.central.last_target
        if target is not None and target.valid_until >= step:
            record.target = target.q_target
            if record.q_if is not None:
                record.deviation = target.q_target - record.q_if
        report = self.central.assessment.report if self.central.assessment is not None else None
        if report is not None and report.feasible and self.central.assessed_at == step:
            record.flex_min, record.flex_max = report.q_min, report.q_max
        record.modes = {c.node_id: c.mode.value for c in self.controllers}
        return record

    def _record(self, record: StepRecord, net: Network, iterations: int) -> None:
        sol = self.solution
        ifc = interface_of(net, self.interface_id)
        record.voltages = sol.voltages()
        record.q_if = interface_q(sol, ifc)
        record.p_if = interface_p(sol, ifc)
        record.taps = {t: int(p) for t, p in self.taps.items()}
        record.violations = [v.to_dict() for v in check_constraints(sol, self.cs)]
        record.oltc_iterations = int(iterations)

    def _event(self, step: int, kind: str, detail: str) -> None:
        self.log.events.append({"step": step, "node": "runner", "kind": kind, "detail": detail})

    def initial_solution(self) -> Optional[PowerFlowSolution]:
        """State before the first step: every asset on its own law, taps as configured."""
        if self.sc.horizon == 0:
            return None
        net = self.physical_network(0)
        try:
            return coupled_power_flow(net, None, self.taps, list(self.assets), pf_opts=self.pf_opts, **self.coupling)
        except PowerFlowError as e:
            logger.warning(f"Initial power flow failed: {e}")
            return None

    def run(self) -> ResultLog:
        self.solution = self.initial_solution()
        for step in range(self.sc.horizon):
            self.log.records.append(self.step(step))
        events = list(self.log.events)
        for node in self.nodes.values():
            events += node.events
        self.log.events = sorted(events, key=lambda e: e["step"])
        self.log.comms = self.bus.log_frame()
        return self.log


def run_scenario(sc: Scenario, config: Optional[Mapping[str, Any]] = None) -> ResultLog:
    """
    Run a scenario to its horizon.

    Args:
        sc: Scenario
        config: Run configuration; the scenario's own sections override it

    Returns:
        ResultLog: One record per step plus events and the delivery log; steps whose power flow
            fails are flagged and the run continues
    """
    try:
        logger.info(f"Running scenario {sc.name}: {sc.horizon} steps, seed {sc.seed}")
        log = ScenarioRun(sc, config).run()
        logger.info(f"Scenario {sc.name} finished: {log.violation_count} violations, "
                    f"{sum(1 for r in log.records if not r.converged)} failed steps")
        return log
    except Exception as e:
        logger.error(f"Scenario {sc.name} aborted: {e}")
        raise
