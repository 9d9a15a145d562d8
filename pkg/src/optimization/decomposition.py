"""
Two-level decomposition: one sub-problem per MV/LV substation plus an MV master problem in which
every substation is a single aggregate reactive power injection.
"""
import math
import logging
from dataclasses import dataclass, replace
from typing import Any, Collection, Dict, List, Mapping, Optional, Tuple

from src.control.characteristics import DirectSetpoint
from src.grid.network import (
    Asset,
    AssetKind,
    InterfaceSpec,
    Network,
    VoltageLevel,
    interface_of,
    subtree_buses,
)
from src.optimization.constraints import ConstraintSet, FlexRange, Infeasible, SetpointBundle, Verification, verify_bundle
from src.optimization.flex import allocate_setpoints, get_flex_method
from src.optimization.search import FlexProblem, Objective, SensitivitySearch

logger = logging.getLogger(__name__)

AGGREGATE_PREFIX = "agg:"
BISECTION_STEPS = 8
POLISH_MAX_ITER = 10
POLISH_TOL = 1e-4
POWER_DIGITS = 6
VOLTAGE_DIGITS = 4


def aggregate_id(transformer_id: str) -> str:
    return f"{AGGREGATE_PREFIX}{transformer_id}"


@dataclass(frozen=True, eq=False)
class SubProblem:
    """LV subtree of one substation with its MV bus as slack at the base-case voltage."""

    transformer_id: str
    mv_bus: str
    network: Network
    interface: InterfaceSpec
    constraints: ConstraintSet
    base_p_if: float
    base_q_if: float

    @property
    def aggregate_id(self) -> str:
        return aggregate_id(self.transformer_id)

    @property
    def passive(self) -> bool:
        """No controllable asset and no tap decision below the transformer."""
        taps = set(self.interface.tap_changers) & self.constraints.tap_decisions
        return not self.interface.controllable_assets and not taps


@dataclass(frozen=True, eq=False)
class MasterProblem:
    network: Network
    interface: InterfaceSpec
    constraints: ConstraintSet


@dataclass(frozen=True, eq=False)
class HierarchicalFlex:
    flex: FlexRange
    master: FlexRange
    sub_ranges: Dict[str, FlexRange]


@dataclass(frozen=True, eq=False)
class HierarchicalAllocation:
    bundle: SetpointBundle
    master: SetpointBundle
    substation_targets: Dict[str, float]
    sub_bundles: Dict[str, SetpointBundle]
    verification: Verification


def reallocate_proportionally(
    shares: Mapping[str, float],
    base: Mapping[str, float],
    bounds: Mapping[str, Tuple[float, float]],
    unreachable: Collection[str],
) -> Dict[str, float]:
    """
    Move the change assigned to unreachable units onto the reachable ones.

    Unreachable units fall back to their base value; their share of the change is spread over the
    reachable units in proportion to the headroom each has left in the needed direction.

    Args:
        shares: Allocated value per unit
        base: Current value per unit
        bounds: (low, high) per unit
        unreachable: Units that cannot receive a command

    Returns:
        Dict[str, float]: New value per unit; the total change is preserved as far as headroom allows
    """
    result = dict(shares)
    missing = 0.0
    for u in unreachable:
        if u in result:
            missing += result[u] - base[u]
            result[u] = base[u]
    if missing == 0.0:
        return result
    reachable = [u for u in result if u not in unreachable]
    if missing > 0:
        headroom = {u: max(bounds[u][1] - result[u], 0.0) for u in reachable}
    else:
        headroom = {u: max(result[u] - bounds[u][0], 0.0) for u in reachable}
    total = sum(headroom.values())
    if total <= 0.0:
        logger.warning("No reachable headroom left to take over the unreachable share")
        return result
    moved = min(abs(missing), total)
    for u in reachable:
        result[u] += math.copysign(moved * headroom[u] / total, missing)
    if moved < abs(missing):
        logger.warning(f"Reachable units cover only {moved:.5f} of {abs(missing):.5f} pu")
    return result


class FlexCache:
    """
    Last flexibility range of every substation, reused while the substation's inputs are unchanged.

    The inputs are the MV bus voltage, the active power, limits and control of every LV asset,
    the tap positions, the constraint bounds, the coupling options and the method with its
    options. Powers are compared to POWER_DIGITS decimals and the voltage to VOLTAGE_DIGITS
    decimals of a per-unit.
    """

    def __init__(self):
        self._entries: Dict[str, Tuple[Tuple, FlexRange]] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(sub: SubProblem, method: str, method_opts: Mapping[str, Any], coupling: Mapping[str, Any]) -> Tuple:
        net, cs = sub.network, sub.constraints
        assets = tuple(
            (a.id, round(a.p, POWER_DIGITS), round(a.q_min, POWER_DIGITS), round(a.q_max, POWER_DIGITS), repr(a.control))
            for a in net.assets
        )
        bounds = tuple((b, cs.v_min.get(b), cs.v_max.get(b)) for b in sorted(net.bus_index))
        return (
            method,
            tuple(sorted(method_opts.items())),
            tuple(sorted(coupling.items())),
            round(net.slack_bus.v_set, VOLTAGE_DIGITS),
            assets,
            tuple(sorted(net.taps.items())),
            tuple(sorted(cs.tap_decisions)),
            bounds,
        )

    def get(self, transformer_id: str, key: Tuple) -> Optional[FlexRange]:
        entry = self._entries.get(transformer_id)
        if entry is not None and entry[0] == key:
            self.hits += 1
            return entry[1]
        self.misses += 1
        return None

    def put(self, transformer_id: str, key: Tuple, flex: FlexRange) -> None:
        self._entries[transformer_id] = (key, flex)

    def clear(self) -> None:
        self._entries.clear()


class Decomposition:
    """
    Per-level problems below one HV/MV interface.

    Args:
        net: Full network
        ifc: HV/MV interface
        cs: Constraint set of the full network
        subproblems: One per MV/LV interface transformer below ifc
        base_bundle: Current setpoints and taps, feasible on the full network
        coupling: Options of the fixed-point loop
        method: Flexibility method used on both levels
        method_opts: Extra keyword arguments for the method
        cache: Substation ranges kept from earlier assessments
    """

    def __init__(self, net: Network, ifc: InterfaceSpec, cs: ConstraintSet, subproblems: List[SubProblem],
                 base_bundle: SetpointBundle, coupling: Optional[Mapping[str, Any]] = None,
                 method: str = "sensitivity", method_opts: Optional[Mapping[str, Any]] = None,
                 cache: Optional[FlexCache] = None):
        self.net = net
        self.ifc = ifc
        self.cs = cs
        self.subproblems = subproblems
        self.base_bundle = base_bundle
        self.coupling = dict(coupling or {})
        self.method = method
        self.method_opts = dict(method_opts or {})
        self.cache = cache
        self._sub_ranges: Optional[Dict[str, FlexRange]] = None

    @property
    def substation_ids(self) -> List[str]:
        return [s.transformer_id for s in self.subproblems]

    def subproblem(self, transformer_id: str) -> SubProblem:
        return next(s for s in self.subproblems if s.transformer_id == transformer_id)

    def sub_ranges(self) -> Dict[str, FlexRange]:
        """Flexibility range per substation; a passive substation is the point of its base flow."""
        if self._sub_ranges is None:
            method = get_flex_method(self.method)
            ranges = {}
            for sub in self.subproblems:
                if sub.passive:
                    ranges[sub.transformer_id] = FlexRange.point(
                        SetpointBundle(dict(sub.network.taps), {}, sub.base_q_if), "fixed")
                    continue
                key = FlexCache.key(sub, self.method, self.method_opts, self.coupling) if self.cache is not None else None
                flex = self.cache.get(sub.transformer_id, key) if self.cache is not None else None
                if flex is None:
                    flex = method(sub.network, sub.interface, sub.constraints, coupling=self.coupling,
                                  **self.method_opts)
                    if self.cache is not None:
                        self.cache.put(sub.transformer_id, key, flex)
                ranges[sub.transformer_id] = flex
            self._sub_ranges = ranges
        return self._sub_ranges

    def aggregate_bounds(self, sub_ranges: Optional[Mapping[str, FlexRange]] = None) -> Dict[str, Tuple[float, float]]:
        """Injection bounds of each aggregate; a substation without flexibility is a point."""
        sub_ranges = self.sub_ranges() if sub_ranges is None else sub_ranges
        bounds = {}
        for sub in self.subproblems:
            r = sub_ranges.get(sub.transformer_id)
            if r is None or not r.feasible:
                bounds[sub.transformer_id] = (-sub.base_q_if, -sub.base_q_if)
            else:
                bounds[sub.transformer_id] = (-r.q_max, -r.q_min)
        return bounds

    def master(self, sub_ranges: Optional[Mapping[str, FlexRange]] = None) -> MasterProblem:
        bounds = self.aggregate_bounds(sub_ranges)
        aggregates = [
            Asset(
                id=sub.aggregate_id,
                bus=sub.mv_bus,
                kind=AssetKind.AGGREGATE,
                p=-sub.base_p_if,
                q_min=bounds[sub.transformer_id][0],
                q_max=bounds[sub.transformer_id][1],
                control=DirectSetpoint(min(max(-sub.base_q_if, bounds[sub.transformer_id][0]),
                                           bounds[sub.transformer_id][1])),
                directly_controllable=True,
            )
            for sub in self.subproblems
        ]
        removed = set().union(*(subtree_buses(self.net, s.transformer_id) for s in self.subproblems))
        keep = [b.id for b in self.net.buses if b.id not in removed]
        slack = self.net.slack_bus
        network = self.net.subnetwork(keep, slack.id, slack.v_set, extra_assets=aggregates)
        return MasterProblem(network, interface_of(network, self.ifc.transformer_id), self.cs.restricted(network))

    def compose(self, master: SetpointBundle, sub_bundles: Mapping[str, SetpointBundle]) -> SetpointBundle:
        taps = dict(self.base_bundle.taps)
        q = dict(self.base_bundle.q_setpoints)
        taps.update(master.taps)
        q.update({k: v for k, v in master.q_setpoints.items() if not k.startswith(AGGREGATE_PREFIX)})
        for b in sub_bundles.values():
            taps.update(b.taps)
            q.update(b.q_setpoints)
        return SetpointBundle(taps, q, master.achieved_q_if)

    def _blend(self, target: SetpointBundle, t: float) -> SetpointBundle:
        base = self.base_bundle
        q = {k: base.q_setpoints.get(k, v) + t * (v - base.q_setpoints.get(k, v)) for k, v in target.q_setpoints.items()}
        taps = {k: int(round(base.taps.get(k, v) + t * (v - base.taps.get(k, v)))) for k, v in target.taps.items()}
        return SetpointBundle(taps, q, target.achieved_q_if)

    def settle(self, bundle: SetpointBundle, q_target: Optional[float] = None) -> Tuple[SetpointBundle, Verification]:
        """
        Verify a composed bundle on the full network, bisecting toward the base point if it
        violates constraints.

        Raises:
            Infeasible: If even the base point violates constraints
        """
        ver = verify_bundle(self.net, self.cs, bundle, self.ifc, **self.coupling)
        if not ver.ok:
            logger.info(f"Composed bundle violates {len(ver.violations)} constraints on the full network, bisecting")
            best: Optional[Tuple[SetpointBundle, Verification]] = None
            lo, hi = 0.0, 1.0
            base_ver = verify_bundle(self.net, self.cs, self.base_bundle, self.ifc, **self.coupling)
            if not base_ver.ok:
                raise Infeasible("Base operating point violates constraints", base_ver.violations)
            best = (self.base_bundle, base_ver)
            for _ in range(BISECTION_STEPS):
                t = 0.5 * (lo + hi)
                candidate = self._blend(bundle, t)
                cand_ver = verify_bundle(self.net, self.cs, candidate, self.ifc, **self.coupling)
                if cand_ver.ok:
                    lo, best = t, (candidate, cand_ver)
                else:
                    hi = t
            bundle, ver = best
        deviation = 0.0 if q_target is None else q_target - ver.q_if
        return replace(bundle, achieved_q_if=ver.q_if, deviation=deviation), ver

    def _sub_allocations(self, targets: Mapping[str, float]) -> Dict[str, SetpointBundle]:
        bundles = {}
        for sub in self.subproblems:
            if sub.passive:
                continue
            bundles[sub.transformer_id] = allocate_setpoints(
                sub.network, sub.interface, sub.constraints, targets[sub.transformer_id], coupling=self.coupling
            )
        return bundles

    def polish(self, side: str, bundle: SetpointBundle, master_range: FlexRange) -> SetpointBundle:
        """
        Continue a settled witness with a search on the full network when it fell short of the
        master's claim by more than POLISH_TOL.

        Taps stay where the composition put them. The returned witness is an exact evaluation on the
        full network, so it is feasible there.
        """
        claim = master_range.q_min if side == "min" else master_range.q_max
        shortfall = bundle.achieved_q_if - claim if side == "min" else claim - bundle.achieved_q_if
        if shortfall <= POLISH_TOL:
            return bundle
        problem = FlexProblem(self.net, self.ifc, self.cs, self.coupling, fixed_taps=bundle.taps)
        q = [bundle.q_setpoints.get(a, b) for a, b in zip(problem.asset_ids, problem.base_q)]
        start = problem.evaluate(problem.clip(q), bundle.taps)
        if not start.feasible:
            return bundle
        search = SensitivitySearch(problem, Objective(side), max_iter=POLISH_MAX_ITER, allow_taps=False)
        best = search.run(start)
        gain = (bundle.achieved_q_if - best.q_if) if side == "min" else (best.q_if - bundle.achieved_q_if)
        if gain <= 0.0:
            return bundle
        logger.info(f"Polished the {side} witness at {self.ifc.transformer_id} by {gain:.5f} pu "
                    f"({shortfall:.5f} pu short of the master range)")
        return problem.bundle(best)

    def flex_range(self) -> HierarchicalFlex:
        """
        Hierarchical flexibility range: sub-ranges first, then the master range over the
        aggregates, each master witness refined per substation and verified on the full network.
        """
        sub_ranges = self.sub_ranges()
        master = self.master(sub_ranges)
        master_range = get_flex_method(self.method)(master.network, master.interface, master.constraints,
                                                    coupling=self.coupling, **self.method_opts)
        witnesses = {}
        for side, witness in (("min", master_range.witness_min), ("max", master_range.witness_max)):
            targets = {s.transformer_id: -witness.q_setpoints[s.aggregate_id] for s in self.subproblems}
            composed = self.compose(witness, self._sub_allocations(targets))
            settled, _ = self.settle(composed)
            witnesses[side] = self.polish(side, settled, master_range)
        w_min, w_max = witnesses["min"], witnesses["max"]
        if w_min.achieved_q_if > w_max.achieved_q_if:
            w_min, w_max = w_max, w_min
        flex = FlexRange(w_min.achieved_q_if, w_max.achieved_q_if, w_min, w_max, True,
                         f"hierarchical-{self.method}", master_range.evaluated)
        logger.info(f"Hierarchical flexibility at {self.ifc.transformer_id}: "
                    f"[{flex.q_min:.5f}, {flex.q_max:.5f}] pu over {len(self.subproblems)} substations")
        return HierarchicalFlex(flex, master_range, dict(sub_ranges))

    def allocate(self, q_target: float, unreachable: Collection[str] = ()) -> HierarchicalAllocation:
        """
        Allocate an interface target over MV assets and substations.

        Args:
            q_target: Interface Q target in per-unit
            unreachable: Substations that cannot receive a command; they keep their base point
                and their share moves to the others in proportion to headroom

        Returns:
            HierarchicalAllocation: Full-network bundle plus the per-level parts
        """
        master = self.master()
        master_bundle = allocate_setpoints(master.network, master.interface, master.constraints, q_target,
                                           coupling=self.coupling)
        bounds = self.aggregate_bounds()
        ids = {s.aggregate_id: s.transformer_id for s in self.subproblems}
        shares = {tid: master_bundle.q_setpoints[agg] for agg, tid in ids.items()}
        if unreachable:
            base = {s.transformer_id: -s.base_q_if for s in self.subproblems}
            shares = reallocate_proportionally(shares, base, bounds, [u for u in unreachable if u in shares])
        targets = {tid: -share for tid, share in shares.items()}
        sub_bundles = self._sub_allocations(targets)
        for tid in unreachable:
            sub_bundles.pop(tid, None)
        bundle, ver = self.settle(self.compose(master_bundle, sub_bundles), q_target)
        return HierarchicalAllocation(bundle, master_bundle, targets, sub_bundles, ver)


def substation_transformers(net: Network, ifc: InterfaceSpec) -> List[str]:
    """Interface-flagged MV/LV transformers below an HV/MV interface, in network order."""
    found = []
    for t in net.transformers:
        if t.id == ifc.transformer_id or not t.is_interface or t.hv_bus not in ifc.downstream_buses:
            continue
        if net.bus(t.hv_bus).level is VoltageLevel.MV and net.bus(t.lv_bus).level is VoltageLevel.LV:
            found.append(t.id)
    return found


def decompose_by_level(
    net: Network,
    ifc_hvmv: InterfaceSpec,
    cs: Optional[ConstraintSet] = None,
    coupling: Optional[Mapping[str, Any]] = None,
    method: str = "sensitivity",
    cache: Optional[FlexCache] = None,
    **method_opts: Any,
) -> Decomposition:
    """
    Split the problem below an HV/MV interface into per-substation sub-problems and an MV master.

    Args:
        net: Full network, radial below each MV/LV transformer
        ifc_hvmv: HV/MV interface
        cs: Constraint set; derived from the network when omitted
        coupling: Options of the fixed-point loop
        method: Flexibility method for both levels
        cache: Substation ranges kept from earlier assessments
        **method_opts: Extra keyword arguments for the method

    Returns:
        Decomposition: Sub-problems at the current operating point, ready for flex_range/allocate

    Raises:
        InterfaceError: If a substation does not separate the network
        Infeasible: If the current operating point cannot be solved
    """
    cs = cs or ConstraintSet.from_network(net)
    problem = FlexProblem(net, ifc_hvmv, cs, coupling)
    base = problem.base()
    if base.solution is None:
        raise Infeasible(f"Base case at {ifc_hvmv.transformer_id} does not solve: {base.error}")
    sol = base.solution

    subproblems = []
    for tid in substation_transformers(net, ifc_hvmv):
        t = net.transformer(tid)
        lv = subtree_buses(net, tid)
        sub = net.subnetwork(set(lv) | {t.hv_bus}, t.hv_bus, sol.voltage(t.hv_bus))
        # MV assets at the substation bus stay in the master problem
        sub = replace(sub, assets=tuple(a for a in sub.assets if a.bus != t.hv_bus))
        s_from, _ = sol.branch_flow(tid)
        subproblems.append(SubProblem(
            transformer_id=tid,
            mv_bus=t.hv_bus,
            network=sub,
            interface=interface_of(sub, tid),
            constraints=cs.restricted(sub),
            base_p_if=float(s_from.real),
            base_q_if=float(s_from.imag),
        ))
    logger.info(f"Decomposed {ifc_hvmv.transformer_id} into {len(subproblems)} substations and one MV master")
    return Decomposition(net, ifc_hvmv, cs, subproblems, problem.bundle(base), coupling, method, method_opts, cache)
