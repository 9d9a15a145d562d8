"""
The four-step coordination protocol as pure functions: flexibility assessment (Step 1), the
upstream target stub (Steps 2-3), target allocation (Step 4), the edge cascade and the
fallback transition.
"""
import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from src.grid.network import InterfaceSpec, Network, interface_of, subtree_buses
from src.optimization.constraints import ConstraintSet, FlexRange, Infeasible, SetpointBundle
from src.optimization.decomposition import (
    Decomposition,
    HierarchicalAllocation,
    FlexCache,
    decompose_by_level,
    substation_transformers,
)
from src.optimization.flex import allocate_setpoints, get_flex_method
from src.coordination.messages import FlexibilityReport, QTarget, SetpointCommand

logger = logging.getLogger(__name__)

DEFAULT_FALLBACK_THRESHOLD = 3
DEFAULT_TARGET_VALIDITY_CYCLES = 2
EDGE_TIE_TOL = 1e-6


class StaleData(Exception):
    """Raised when no measurement is recent enough to assess flexibility."""


class Role(str, Enum):
    UPSTREAM = "upstream"
    CENTRAL = "central"
    EDGE = "edge"


class Mode(str, Enum):
    COORDINATED = "coordinated"
    FALLBACK = "fallback"


def edge_node(transformer_id: str) -> str:
    return f"edge:{transformer_id}"


def tap_node(transformer_id: str) -> str:
    return f"tap:{transformer_id}"


@dataclass(frozen=True)
class ControllerState:
    role: Role
    node_id: str
    last_heartbeat_rx: Dict[str, int] = field(default_factory=dict)
    mode: Mode = Mode.COORDINATED
    mode_since: int = 0
    cached_reports: Dict[str, FlexibilityReport] = field(default_factory=dict)
    pending_target: Optional[QTarget] = None
    last_command: Optional[SetpointCommand] = None
    last_command_rx: Optional[int] = None
    last_seq: Dict[str, int] = field(default_factory=dict)

    def staleness(self, peer: str, now: int) -> float:
        last = self.last_heartbeat_rx.get(peer)
        return math.inf if last is None else now - last


def fallback_transition(state: ControllerState, now: int, peer: str = "central",
                        threshold: int = DEFAULT_FALLBACK_THRESHOLD) -> ControllerState:
    """
    Advance the coordinated/fallback mode of a controller.

    Fallback starts once the peer's heartbeat is `threshold` steps old. Coordinated operation
    resumes only when a fresh heartbeat and a command received after entering fallback are
    both present; a heartbeat alone is not enough.

    Args:
        state: Current controller state
        now: Current step
        peer: Node whose heartbeats are watched
        threshold: Missed heartbeat periods that trigger fallback

    Returns:
        ControllerState: State with the new mode
    """
    stale = state.staleness(peer, now) >= threshold
    if state.mode is Mode.COORDINATED and stale:
        logger.info(f"{state.node_id} enters fallback at t={now} (last heartbeat from {peer}: "
                    f"{state.last_heartbeat_rx.get(peer)})")
        return replace(state, mode=Mode.FALLBACK, mode_since=now)
    if state.mode is Mode.FALLBACK and not stale:
        cmd = state.last_command
        fresh_command = (
            cmd is not None and not cmd.fallback and state.last_command_rx is not None
            and state.last_command_rx > state.mode_since and cmd.valid_until >= now
        )
        if fresh_command:
            logger.info(f"{state.node_id} returns to coordinated mode at t={now}")
            return replace(state, mode=Mode.COORDINATED, mode_since=now)
    return state


@dataclass(frozen=True, eq=False)
class Assessment:
    report: FlexibilityReport
    decomposition: Optional[Decomposition]
    flex: Optional[FlexRange]


def assess_flexibility(
    net_view: Network,
    ifc: InterfaceSpec,
    cs: ConstraintSet,
    now: int = 0,
    measured_at: Optional[Mapping[str, int]] = None,
    max_age: int = DEFAULT_FALLBACK_THRESHOLD,
    coupling: Optional[Mapping[str, Any]] = None,
    method: str = "sensitivity",
    cache: Optional[FlexCache] = None,
    **method_opts: Any,
) -> Assessment:
    """
    Step 1 with its intermediate results; see central_step1. `cache` keeps substation ranges
    between calls.
    """
    if measured_at:
        fresh = [node for node, t in measured_at.items() if now - t < max_age]
        if not fresh:
            raise StaleData(f"All {len(measured_at)} measurements are older than {max_age} steps at t={now}")

    try:
        decomposition = decompose_by_level(net_view, ifc, cs, coupling, method, cache, **method_opts)
        if decomposition.subproblems:
            flex = decomposition.flex_range().flex
        else:
            flex = get_flex_method(method)(net_view, ifc, cs, coupling=coupling, **method_opts)
    except Infeasible as e:
        logger.warning(f"Flexibility assessment at {ifc.transformer_id} infeasible: {e}")
        return Assessment(FlexibilityReport(ifc.transformer_id, math.nan, math.nan, False, now), None, None)
    report = FlexibilityReport(ifc.transformer_id, flex.q_min, flex.q_max, True, now)
    return Assessment(report, decomposition, flex)


def central_step1(net_view: Network, ifc: InterfaceSpec, cs: ConstraintSet, **kwargs: Any) -> FlexibilityReport:
    """
    Aggregate the feasible interface Q range of all controllable MV and LV assets.

    Args:
        net_view: Central's model of the current grid state
        ifc: HV/MV interface
        cs: Constraint set
        **kwargs: now, measured_at, max_age, coupling, method, cache and method options

    Returns:
        FlexibilityReport: (q_min, q_max); flagged infeasible when no feasible point exists

    Raises:
        StaleData: If every measurement is stale
    """
    return assess_flexibility(net_view, ifc, cs, **kwargs).report


@dataclass(frozen=True)
class UpstreamDecision:
    targets: List[QTarget]
    alarm: Optional[str] = None


def upstream_step2_3(reports: Sequence[FlexibilityReport], tso_request_q: float, now: int = 0,
                     valid_until: Optional[int] = None) -> UpstreamDecision:
    """
    Stand-in for the HV-level optimisation: clamp the TSO request into the reported range.

    HV-connected resources are not modelled. With several interfaces the clamped request is
    split in proportion to each range's width.

    Args:
        reports: Latest report per interface
        tso_request_q: Requested total interface Q in per-unit
        now: Current step
        valid_until: Last step the targets are valid; now + 2 when omitted

    Returns:
        UpstreamDecision: Targets, or none and an alarm if a report is flagged infeasible
    """
    if not reports:
        raise ValueError("upstream_step2_3 needs at least one flexibility report")
    valid_until = now + DEFAULT_TARGET_VALIDITY_CYCLES if valid_until is None else valid_until
    infeasible = [r.interface for r in reports if not r.feasible]
    if infeasible:
        alarm = f"Target withheld at t={now}: infeasible flexibility report from {', '.join(infeasible)}"
        logger.warning(alarm)
        return UpstreamDecision([], alarm)

    q_min = sum(r.q_min for r in reports)
    q_max = sum(r.q_max for r in reports)
    clamped = min(max(tso_request_q, q_min), q_max)
    if clamped != tso_request_q:
        logger.info(f"TSO request {tso_request_q:.5f} clamped to {clamped:.5f} pu")
    if len(reports) == 1:
        return UpstreamDecision([QTarget(reports[0].interface, clamped, valid_until)])
    width = q_max - q_min
    share = 0.0 if width <= 0 else (clamped - q_min) / width
    return UpstreamDecision([
        QTarget(r.interface, r.q_min + share * (r.q_max - r.q_min), valid_until) for r in reports
    ])


@dataclass(frozen=True, eq=False)
class Step4Result:
    commands: List[Tuple[str, SetpointCommand]]
    bundle: Optional[SetpointBundle]
    substation_targets: Dict[str, float] = field(default_factory=dict)
    fallback: bool = False


def central_step4(
    target: QTarget,
    net_view: Network,
    cs: ConstraintSet,
    now: int = 0,
    decomposition: Optional[Decomposition] = None,
    unreachable: Sequence[str] = (),
    valid_until: Optional[int] = None,
    coupling: Optional[Mapping[str, Any]] = None,
) -> Step4Result:
    """
    Allocate an interface target to MV assets, substations and central tap decisions.

    Args:
        target: Fresh interface target
        net_view: Central's model of the current grid state
        cs: Constraint set
        now: Current step
        decomposition: Decomposition of the current state; built when omitted
        unreachable: Substation transformer ids whose edge is not reachable
        valid_until: Validity of the emitted commands; the target's when omitted
        coupling: Options of the fixed-point loop

    Returns:
        Step4Result: One command per MV asset, per edge and per central tap actuator, or fallback
            directives if the allocation is infeasible
    """
    ifc = interface_of(net_view, target.interface)
    valid_until = target.valid_until if valid_until is None else valid_until
    if target.valid_until < now:
        raise ValueError(f"Target expired at {target.valid_until}, now {now}")
    substations = substation_transformers(net_view, ifc)
    lv_buses = set().union(*(subtree_buses(net_view, tid) for tid in substations))
    mv_assets = [a for a in ifc.controllable_assets if net_view.asset(a).bus not in lv_buses]
    try:
        decomposition = decomposition or decompose_by_level(net_view, ifc, cs, coupling)
        if decomposition.subproblems:
            allocation: HierarchicalAllocation = decomposition.allocate(target.q_target, unreachable)
            master, substation_targets, bundle = allocation.master, allocation.substation_targets, allocation.bundle
        else:
            bundle = allocate_setpoints(net_view, ifc, cs, target.q_target, coupling=coupling)
            master, substation_targets = bundle, {}
    except Infeasible as e:
        logger.warning(f"Allocation infeasible at t={now}, sending fallback directives: {e}")
        receivers = mv_assets + [edge_node(tid) for tid in substations if tid not in unreachable]
        commands = [(r, SetpointCommand(r, valid_until, fallback=True)) for r in receivers]
        return Step4Result(commands, None, {}, True)

    commands: List[Tuple[str, SetpointCommand]] = []
    for asset_id in mv_assets:
        if asset_id in master.q_setpoints:
            commands.append((asset_id, SetpointCommand(asset_id, valid_until, q=master.q_setpoints[asset_id])))
    for tid in sorted(cs.tap_decisions):
        if tid in master.taps and tid not in substations:
            commands.append((tap_node(tid), SetpointCommand(tid, valid_until, taps={tid: master.taps[tid]})))
    for tid, q_sub in substation_targets.items():
        if tid in unreachable:
            continue
        commands.append((edge_node(tid), SetpointCommand(tid, valid_until, substation_q=q_sub)))
    logger.info(f"Step 4 at t={now}: target {target.q_target:.5f} pu, {len(commands)} commands, "
                f"expected deviation {bundle.deviation:.2e}")
    return Step4Result(commands, bundle, dict(substation_targets))


@dataclass(frozen=True)
class LocalMeasurements:
    measured_at: int
    mv_voltage: float
    q_if: float
    asset_p: Dict[str, float] = field(default_factory=dict)
    tap_position: Optional[int] = None


@dataclass(frozen=True)
class EdgeDecision:
    """`taps` None means the local tap automaton is in charge."""

    taps: Optional[Dict[str, int]]
    setpoints: Dict[str, float]
    achieved_q_if: float
    deviation: float = 0.0
    infeasible: bool = False

    @property
    def local(self) -> bool:
        return self.taps is None


def local_model(local_net: Network, transformer_id: str, measurements: LocalMeasurements) -> Network:
    """LV subtree model at the measured state: measured p, MV bus at measured voltage, measured tap."""
    mv_bus = local_net.transformer(transformer_id).hv_bus
    model = local_net.with_asset_power(measurements.asset_p).with_slack(mv_bus, measurements.mv_voltage)
    if measurements.tap_position is not None and local_net.transformer(transformer_id).tap is not None:
        model = model.with_taps({transformer_id: measurements.tap_position})
    return model


def edge_cascade(
    edge_state: ControllerState,
    substation_q_command: Optional[SetpointCommand],
    local_measurements: LocalMeasurements,
    lv_cs: ConstraintSet,
    local_net: Network,
    transformer_id: str,
    now: int = 0,
    coupling: Optional[Mapping[str, Any]] = None,
) -> EdgeDecision:
    """
    Translate a substation Q command into an own tap position and LV asset setpoints.

    Every admissible tap position is tried with a continuous allocation on the local model, so
    the indirect response of Q(V) assets to the tap is part of each prediction. The smallest
    deviation wins; within 1e-6 fewer tap moves win.

    Args:
        edge_state: State of the edge controller
        substation_q_command: Last command from the central controller, if any
        local_measurements: Locally measured state
        lv_cs: Constraints of the LV subtree
        local_net: LV subtree with the MV bus as slack
        transformer_id: The substation transformer
        now: Current step
        coupling: Options of the fixed-point loop

    Returns:
        EdgeDecision: Tap and setpoints; a local decision when no valid command applies
    """
    cmd = substation_q_command
    if cmd is None or cmd.fallback or cmd.substation_q is None or cmd.valid_until < now:
        return EdgeDecision(None, {}, local_measurements.q_if)

    model = local_model(local_net, transformer_id, local_measurements)
    ifc = interface_of(model, transformer_id)
    tc = model.transformer(transformer_id).tap
    current = tc.position if tc is not None else None
    if tc is not None and transformer_id in lv_cs.tap_decisions:
        positions = sorted(range(tc.pos_min, tc.pos_max + 1), key=lambda p: (abs(p - current), p))
    else:
        positions = [current]
    if not ifc.controllable_assets and len(positions) == 1:
        # nothing to dispatch: the substation keeps its tap and follows its measured flow
        taps = {transformer_id: current} if current is not None else {}
        q_if = local_measurements.q_if
        return EdgeDecision(taps, {}, q_if, cmd.substation_q - q_if)

    cs = lv_cs.with_tap_decisions(())
    best: Optional[SetpointBundle] = None
    for pos in positions:
        fixed = {transformer_id: pos} if pos is not None else None
        try:
            bundle = allocate_setpoints(model, ifc, cs, cmd.substation_q, coupling=coupling, fixed_taps=fixed)
        except Infeasible:
            continue
        # positions are ordered by distance from the current one, so ties keep fewer moves
        if best is None or abs(bundle.deviation) < abs(best.deviation) - EDGE_TIE_TOL:
            best = bundle

    if best is None:
        logger.warning(f"{edge_state.node_id}: no feasible local dispatch for command {cmd.substation_q:.5f}")
        taps = {transformer_id: current} if current is not None else {}
        return EdgeDecision(taps, {}, local_measurements.q_if, cmd.substation_q - local_measurements.q_if, True)
    taps = {transformer_id: best.taps[transformer_id]} if current is not None else {}
    return EdgeDecision(taps, dict(best.q_setpoints), best.achieved_q_if, best.deviation)
