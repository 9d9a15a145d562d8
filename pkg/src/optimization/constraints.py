"""
Operational limits, violation checks and the setpoint/flexibility result types.
"""
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Collection, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

from src.control.characteristics import FallbackMode
from src.control.coupled import coupled_power_flow
from src.grid.network import InterfaceSpec, Network, TapVector
from src.powerflow.solver import PowerFlowSolution, interface_q

logger = logging.getLogger(__name__)

VIOLATION_TOL = 1e-9


class OptimisationError(Exception):
    """Base class for optimisation failures."""


class Infeasible(OptimisationError):
    """No operating point satisfies the constraints; carries the violations of the best attempt."""

    def __init__(self, message: str, violations: Sequence["Violation"] = ()):
        self.violations = list(violations)
        detail = "; ".join(str(v) for v in self.violations[:5])
        super().__init__(f"{message}: {detail}" if detail else message)


class OracleTooLarge(OptimisationError):
    pass


@dataclass(frozen=True)
class BranchRating:
    """`current` ratings compare |I| at both ends, `power` ratings compare |S|; both per-unit."""

    kind: str
    limit: float


@dataclass(frozen=True)
class Violation:
    kind: str  # voltage, thermal or capability
    element: str
    bound: str  # min, max or rating
    value: float
    limit: float
    magnitude: float

    @property
    def loading(self) -> float:
        return self.value / self.limit if self.limit else math.inf

    def __str__(self) -> str:
        return f"{self.kind} {self.element} {self.bound}: {self.value:.6f} vs {self.limit:.6f} (by {self.magnitude:.2e})"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "element": self.element,
            "bound": self.bound,
            "value": self.value,
            "limit": self.limit,
            "magnitude": self.magnitude,
        }


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    v_min: Dict[str, float]
    v_max: Dict[str, float]
    branch_ratings: Dict[str, BranchRating] = field(default_factory=dict)
    asset_limits: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    tap_decisions: FrozenSet[str] = frozenset()

    @classmethod
    def from_network(
        cls,
        net: Network,
        tap_decisions: Optional[Collection[str]] = None,
        v_min: Optional[float] = None,
        v_max: Optional[float] = None,
        bus_overrides: Optional[Mapping[str, Tuple[float, float]]] = None,
    ) -> "ConstraintSet":
        """
        Constraints implied by the network data.

        Args:
            net: Network
            tap_decisions: Tap changers the optimiser may move; all of them when omitted
            v_min: Uniform lower voltage bound replacing the per-bus values
            v_max: Uniform upper voltage bound replacing the per-bus values
            bus_overrides: Per-bus (v_min, v_max) applied last

        Returns:
            ConstraintSet: Voltage bounds for every bus, thermal ratings, asset capabilities
        """
        lo = {b.id: b.v_min if v_min is None else float(v_min) for b in net.buses}
        hi = {b.id: b.v_max if v_max is None else float(v_max) for b in net.buses}
        for bus_id, (b_lo, b_hi) in (bus_overrides or {}).items():
            lo[bus_id], hi[bus_id] = float(b_lo), float(b_hi)

        ratings = {ln.id: BranchRating("current", ln.i_max) for ln in net.lines if math.isfinite(ln.i_max)}
        ratings.update({t.id: BranchRating("power", t.s_rated / net.s_base) for t in net.transformers})
        limits = {a.id: (a.q_min, a.q_max) for a in net.assets if a.directly_controllable}
        decisions = frozenset(net.tap_changers) if tap_decisions is None else frozenset(tap_decisions)
        cs = cls(lo, hi, ratings, limits, decisions)
        cs.check_covers(net)
        return cs

    def check_covers(self, net: Network) -> None:
        for b in net.buses:
            if b.id not in self.v_min or b.id not in self.v_max:
                raise ValueError(f"No voltage bounds for bus {b.id}")
            if not 0 < self.v_min[b.id] < self.v_max[b.id]:
                raise ValueError(f"Empty voltage bounds for bus {b.id}")
        unknown = sorted(t for t in self.tap_decisions if t not in net.tap_changers)
        if unknown:
            raise ValueError(f"Tap decisions without tap changer: {', '.join(unknown)}")

    def restricted(self, net: Network) -> "ConstraintSet":
        """Constraint set for a sub-network; assets new to it keep their own capability."""
        buses = {b.id for b in net.buses}
        branches = {ln.id for ln in net.lines} | {t.id for t in net.transformers}
        limits = {a.id: self.asset_limits.get(a.id, (a.q_min, a.q_max)) for a in net.assets if a.directly_controllable}
        return ConstraintSet(
            v_min={k: v for k, v in self.v_min.items() if k in buses},
            v_max={k: v for k, v in self.v_max.items() if k in buses},
            branch_ratings={k: v for k, v in self.branch_ratings.items() if k in branches},
            asset_limits=limits,
            tap_decisions=frozenset(t for t in self.tap_decisions if t in net.tap_changers),
        )

    def with_voltage_bounds(self, v_min: float, v_max: float) -> "ConstraintSet":
        return replace(self, v_min={k: v_min for k in self.v_min}, v_max={k: v_max for k in self.v_max})

    def with_tap_decisions(self, tap_decisions: Collection[str]) -> "ConstraintSet":
        return replace(self, tap_decisions=frozenset(tap_decisions))

    def q_bounds(self, net: Network, asset_id: str) -> Tuple[float, float]:
        """Capability of an asset at its current p, intersected with the configured limits."""
        a = net.asset(asset_id)
        lo, hi = a.q_bounds()
        c_lo, c_hi = self.asset_limits.get(asset_id, (-math.inf, math.inf))
        lo, hi = max(lo, c_lo), min(hi, c_hi)
        if lo > hi:
            lo = hi = min(max(0.0, lo), hi)
        return lo, hi


def check_constraints(sol: PowerFlowSolution, cs: ConstraintSet, tol: float = VIOLATION_TOL) -> List[Violation]:
    """
    List every violated limit of a solution.

    Args:
        sol: Converged power flow solution
        cs: Constraint set
        tol: Slack below which an excess is not reported

    Returns:
        List[Violation]: Voltage, thermal and capability violations; empty when feasible
    """
    violations: List[Violation] = []
    for bus_id, vm in zip(sol.bus_ids, sol.vm):
        lo, hi = cs.v_min.get(bus_id), cs.v_max.get(bus_id)
        if lo is not None and vm < lo - tol:
            violations.append(Violation("voltage", bus_id, "min", float(vm), lo, float(lo - vm)))
        if hi is not None and vm > hi + tol:
            violations.append(Violation("voltage", bus_id, "max", float(vm), hi, float(vm - hi)))

    i_from, i_to = sol.branch_currents()
    for k, branch_id in enumerate(sol.branch_ids):
        rating = cs.branch_ratings.get(branch_id)
        if rating is None or not math.isfinite(rating.limit):
            continue
        if rating.kind == "current":
            value = float(max(i_from[k], i_to[k]))
        else:
            value = float(max(abs(sol.s_from[k]), abs(sol.s_to[k])))
        if value > rating.limit + tol:
            violations.append(Violation("thermal", branch_id, "rating", value, rating.limit, value - rating.limit))

    for asset_id, (lo, hi) in cs.asset_limits.items():
        if asset_id not in sol.dispatch:
            continue
        q = sol.dispatch[asset_id][1]
        if q < lo - tol:
            violations.append(Violation("capability", asset_id, "min", q, lo, lo - q))
        elif q > hi + tol:
            violations.append(Violation("capability", asset_id, "max", q, hi, q - hi))
    return violations


@dataclass(frozen=True)
class SetpointBundle:
    """Tap positions plus q setpoints of directly controllable assets; the unit of actuation."""

    taps: TapVector
    q_setpoints: Dict[str, float]
    achieved_q_if: float
    deviation: float = 0.0

    def moves_from(self, taps: Mapping[str, int]) -> int:
        return sum(abs(pos - taps.get(tid, pos)) for tid, pos in self.taps.items())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "taps": dict(sorted(self.taps.items())),
            "q_setpoints": dict(sorted(self.q_setpoints.items())),
            "achieved_q_if": self.achieved_q_if,
            "deviation": self.deviation,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SetpointBundle":
        return cls(
            taps={k: int(v) for k, v in data.get("taps", {}).items()},
            q_setpoints={k: float(v) for k, v in data.get("q_setpoints", {}).items()},
            achieved_q_if=float(data.get("achieved_q_if", 0.0)),
            deviation=float(data.get("deviation", 0.0)),
        )


@dataclass(frozen=True)
class FlexRange:
    q_min: float
    q_max: float
    witness_min: Optional[SetpointBundle]
    witness_max: Optional[SetpointBundle]
    feasible: bool
    method: str = ""
    evaluated: int = 0
    skipped: int = 0
    grid_step: float = 0.0
    violations: Tuple[Violation, ...] = ()

    @property
    def width(self) -> float:
        return self.q_max - self.q_min if self.feasible else 0.0

    def contains(self, q: float, eps: float = 0.0) -> bool:
        return self.feasible and self.q_min - eps <= q <= self.q_max + eps

    def clamp(self, q: float) -> float:
        return min(max(q, self.q_min), self.q_max)

    @classmethod
    def infeasible(cls, method: str, violations: Sequence[Violation] = (), evaluated: int = 0,
                   skipped: int = 0) -> "FlexRange":
        return cls(math.nan, math.nan, None, None, False, method, evaluated, skipped, 0.0, tuple(violations))

    @classmethod
    def point(cls, bundle: SetpointBundle, method: str) -> "FlexRange":
        return cls(bundle.achieved_q_if, bundle.achieved_q_if, bundle, bundle, True, method, 1)


@dataclass(frozen=True, eq=False)
class Verification:
    solution: PowerFlowSolution
    violations: List[Violation]
    q_if: float

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_bundle(
    net: Network,
    cs: ConstraintSet,
    bundle: SetpointBundle,
    ifc: Optional[InterfaceSpec] = None,
    fallback_assets: Collection[str] = (),
    fallback_mode: FallbackMode = FallbackMode.PROFILE,
    **coupling: Any,
) -> Verification:
    """
    Re-simulate a bundle from scratch and check it against the constraints.

    Args:
        net: Network
        cs: Constraint set
        bundle: Taps and setpoints to apply
        ifc: Interface whose Q is reported; 0.0 when omitted
        fallback_assets: Assets following their fallback law
        fallback_mode: Fallback law selection
        **coupling: alpha, tol and max_outer of the fixed-point loop

    Returns:
        Verification: Solution, violations (setpoints outside capability included) and interface Q
    """
    sol = coupled_power_flow(net, bundle.q_setpoints, bundle.taps or None, fallback_assets, fallback_mode, **coupling)
    violations = check_constraints(sol, cs)
    flagged = {v.element for v in violations if v.kind == "capability"}
    for asset_id, q in bundle.q_setpoints.items():
        if asset_id in flagged:
            continue
        lo, hi = cs.q_bounds(net, asset_id)
        if q < lo - VIOLATION_TOL or q > hi + VIOLATION_TOL:
            violations.append(Violation("capability", asset_id, "min" if q < lo else "max", q,
                                        lo if q < lo else hi, max(lo - q, q - hi)))
    q_if = interface_q(sol, ifc) if ifc is not None else 0.0
    return Verification(sol, violations, q_if)
