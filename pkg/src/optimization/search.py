"""
Exact operating-point evaluation and the sensitivity-guided search shared by the flexibility
and allocation routines.
"""
import math
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.control.characteristics import setpoint_of
from src.control.coupled import coupled_power_flow
from src.grid.network import InterfaceSpec, Network, TapVector
from src.optimization.constraints import ConstraintSet, Infeasible, SetpointBundle, Violation, check_constraints
from src.powerflow.sensitivity import SensitivityMatrices, sensitivities
from src.powerflow.solver import PowerFlowError, PowerFlowSolution, interface_q

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 30
DEFAULT_TOL = 1e-5
DEFAULT_STEP_FRACTION = 0.25
MIN_STEP_FRACTION = 1.0 / 64
REPAIR_ITERATIONS = 10
REPAIR_MARGIN = 1e-4
SENSITIVITY_FLOOR = 1e-9
TARGET_REACHED = 1e-9
TAP_SCAN_LIMIT = 41


@dataclass(frozen=True, eq=False)
class Evaluation:
    """Exact result of one (q, taps) operating point."""

    q: Tuple[float, ...]
    taps: TapVector
    solution: Optional[PowerFlowSolution]
    q_if: float
    violations: Tuple[Violation, ...]
    error: Optional[str] = None

    @property
    def feasible(self) -> bool:
        return self.solution is not None and not self.violations

    @property
    def violation_total(self) -> float:
        if self.solution is None:
            return math.inf
        return float(sum(v.magnitude for v in self.violations))


class FlexProblem:
    """
    Decision space at one interface: q of its directly controllable assets and the
    positions of the tap changers the constraint set makes decisions.

    Args:
        net: Network
        ifc: Interface the objective is measured at
        cs: Constraint set
        coupling: alpha, tol and max_outer passed to coupled_power_flow
        fixed_taps: Positions pinned for this problem; pinned changers are not decisions
    """

    def __init__(self, net: Network, ifc: InterfaceSpec, cs: ConstraintSet,
                 coupling: Optional[Mapping[str, Any]] = None,
                 fixed_taps: Optional[Mapping[str, int]] = None):
        self.net = net
        self.ifc = ifc
        self.cs = cs
        self.coupling = dict(coupling or {})
        fixed = dict(fixed_taps or {})
        self.asset_ids: Tuple[str, ...] = tuple(ifc.controllable_assets)
        self.decision_taps: Tuple[str, ...] = tuple(
            t for t in ifc.tap_changers if t in cs.tap_decisions and t not in fixed
        )
        bounds = [cs.q_bounds(net, a) for a in self.asset_ids]
        self.lo = np.array([b[0] for b in bounds], dtype=float)
        self.hi = np.array([b[1] for b in bounds], dtype=float)
        base = []
        for a_id, lo, hi in zip(self.asset_ids, self.lo, self.hi):
            q = setpoint_of(net.asset(a_id).control)
            base.append(min(max(0.0 if q is None else q, lo), hi))
        self.base_q = np.array(base, dtype=float)
        self.base_taps: TapVector = dict(net.taps)
        self.base_taps.update({k: int(v) for k, v in fixed.items()})
        self.evaluations = 0
        self._cache: Dict[Tuple, Evaluation] = {}
        self._sensitivities: Dict[Tuple, SensitivityMatrices] = {}

    def clip(self, q: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(q, self.lo), self.hi)

    def evaluate(self, q: Sequence[float], taps: Optional[Mapping[str, int]] = None) -> Evaluation:
        """Run the coupled power flow for an operating point and check every constraint."""
        full = dict(self.base_taps)
        if taps:
            full.update({k: int(v) for k, v in taps.items()})
        q_tuple = tuple(float(x) for x in q)
        key = (q_tuple, tuple(sorted(full.items())))
        if key in self._cache:
            return self._cache[key]
        self.evaluations += 1
        overrides = dict(zip(self.asset_ids, q_tuple))
        try:
            sol = coupled_power_flow(self.net, overrides, full or None, **self.coupling)
        except PowerFlowError as e:
            ev = Evaluation(q_tuple, full, None, math.nan, (), str(e))
        else:
            ev = Evaluation(q_tuple, full, sol, interface_q(sol, self.ifc), tuple(check_constraints(sol, self.cs)))
        self._cache[key] = ev
        return ev

    def sensitivities_at(self, ev: Evaluation) -> SensitivityMatrices:
        """Asset sensitivities at an evaluated point, computed once per operating point."""
        key = (ev.q, tuple(sorted(ev.taps.items())))
        if key not in self._sensitivities:
            self._sensitivities[key] = sensitivities(self.net, ev.solution, self.ifc, ev.taps,
                                                     asset_ids=self.asset_ids, tap_ids=())
        return self._sensitivities[key]

    def base(self) -> Evaluation:
        return self.evaluate(self.base_q)

    def bundle(self, ev: Evaluation, target: Optional[float] = None) -> SetpointBundle:
        deviation = 0.0 if target is None else target - ev.q_if
        return SetpointBundle(dict(ev.taps), dict(zip(self.asset_ids, ev.q)), ev.q_if, deviation)


@dataclass(frozen=True)
class Objective:
    """`min`/`max` push the interface Q to an extreme, `target` minimises |q_if - target|."""

    kind: str
    target: float = 0.0

    def value(self, q_if: float) -> float:
        if self.kind == "min":
            return q_if
        if self.kind == "max":
            return -q_if
        return abs(q_if - self.target)

    def direction(self, q_if: float) -> float:
        if self.kind == "min":
            return -1.0
        if self.kind == "max":
            return 1.0
        return float(np.sign(self.target - q_if))


class SensitivitySearch:
    """
    Projected first-order search over asset q with a full tap scan and one-step tap lookahead.

    Every accepted point is an exact evaluation; the linear model only proposes steps.
    """

    def __init__(self, problem: FlexProblem, objective: Objective,
                 max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
                 initial_step_fraction: float = DEFAULT_STEP_FRACTION, allow_taps: bool = True):
        self.problem = problem
        self.objective = objective
        self.max_iter = max_iter
        self.tol = tol
        self.initial_step_fraction = initial_step_fraction
        self.allow_taps = allow_taps and bool(problem.decision_taps)
        self.iterations = 0

    def run(self, start: Optional[Evaluation] = None) -> Evaluation:
        """
        Returns:
            Evaluation: Best feasible point found

        Raises:
            Infeasible: If the start point violates constraints and cannot be repaired
        """
        current = start or self.problem.base()
        if not current.feasible:
            current = self.repair(current)
        tracking = self.objective.kind == "target"
        if self.allow_taps and not tracking:
            current = self.tap_scan(current)

        current = self._refine(current)
        if self.allow_taps and not (tracking and self.objective.value(current.q_if) <= self.tol):
            # the tap response is not monotone through Q(V) deadbands; rescan at the refined q
            scanned = self.tap_scan(current)
            if scanned is not current:
                current = self._refine(scanned)
        return current

    def tap_scan(self, current: Evaluation) -> Evaluation:
        """
        Try every position of each decision tap changer at the current q, one changer at a time.

        Changers with more than TAP_SCAN_LIMIT positions are scanned at both ends, the neutral
        position and one step around the current position.

        Returns:
            Evaluation: The best feasible point; `current` itself unless another one is better by more than tol
        """
        p = self.problem
        best, best_value = current, self.objective.value(current.q_if)
        for tid in p.decision_taps:
            tc = p.net.transformer(tid).tap
            now = best.taps[tid]
            span = range(tc.pos_min, tc.pos_max + 1)
            if len(span) <= TAP_SCAN_LIMIT:
                positions = set(span)
            else:
                positions = {x for x in (tc.pos_min, tc.neutral, tc.pos_max, now - 1, now + 1) if tc.within_bounds(x)}
            # nearest positions first, so ties keep fewer moves
            for position in sorted(positions, key=lambda x: (abs(x - now), x)):
                if position == now:
                    continue
                moved = dict(best.taps)
                moved[tid] = position
                candidate = p.evaluate(best.q, moved)
                if not candidate.feasible:
                    continue
                value = self.objective.value(candidate.q_if)
                if value < best_value - self.tol:
                    best, best_value = candidate, value
        if best is not current:
            logger.debug(f"Tap scan at {p.ifc.transformer_id} moved to {dict((t, best.taps[t]) for t in p.decision_taps)}")
        return best

    def _refine(self, current: Evaluation) -> Evaluation:
        frac = self.initial_step_fraction
        for iteration in range(1, self.max_iter + 1):
            self.iterations = iteration
            before = self.objective.value(current.q_if)
            if self.objective.kind == "target" and before <= TARGET_REACHED:
                break
            candidate, frac = self._q_step(current, frac)
            if candidate is not None:
                current = candidate
            if self.allow_taps and candidate is None:
                # q alone is stuck; try one tap step with a follow-up q step
                moved = self._tap_lookahead(current)
                if moved is not None:
                    current = moved
                    frac = max(frac, self.initial_step_fraction)
            gain = before - self.objective.value(current.q_if)
            logger.debug(f"{self.objective.kind} search iteration {self.iterations}: q_if={current.q_if:.6f} gain={gain:.2e}")
            if gain < self.tol and (candidate is not None or frac < MIN_STEP_FRACTION):
                break
        return current

    def _sensitivities(self, ev: Evaluation) -> SensitivityMatrices:
        return self.problem.sensitivities_at(ev)

    def _bus_bounds(self, sol: PowerFlowSolution) -> Tuple[np.ndarray, np.ndarray]:
        cs = self.problem.cs
        lo = np.array([cs.v_min.get(b, -math.inf) for b in sol.bus_ids])
        hi = np.array([cs.v_max.get(b, math.inf) for b in sol.bus_ids])
        return lo, hi

    def _trim(self, raw: np.ndarray, dqif: np.ndarray, dv_dq: np.ndarray, sol: PowerFlowSolution,
              margin_lo: np.ndarray, margin_hi: np.ndarray) -> np.ndarray:
        """Shorten each asset's step so the predicted voltages stay inside the bounds, most effective asset first."""
        v_lo, v_hi = self._bus_bounds(sol)
        v_lo, v_hi = v_lo + margin_lo, v_hi - margin_hi
        acc = np.zeros(len(sol.vm))
        dq = np.zeros_like(raw)
        for i in np.argsort(-np.abs(dqif), kind="stable"):
            if raw[i] == 0.0:
                continue
            col = dv_dq[:, i] * raw[i]
            t = 1.0
            up, down = col > 1e-15, col < -1e-15
            if np.any(up):
                room = np.maximum(v_hi[up] - sol.vm[up] - acc[up], 0.0)
                t = min(t, float(np.min(room / col[up])))
            if np.any(down):
                room = np.maximum(sol.vm[down] + acc[down] - v_lo[down], 0.0)
                t = min(t, float(np.min(room / -col[down])))
            dq[i] = t * raw[i]
            acc += t * col
        return dq

    def _raw_step(self, ev: Evaluation, dqif: np.ndarray, frac: float) -> np.ndarray:
        p = self.problem
        q = np.array(ev.q)
        direction = self.objective.direction(ev.q_if)
        s = np.where(np.abs(dqif) > SENSITIVITY_FLOOR, np.sign(dqif) * direction, 0.0)
        headroom = np.where(s > 0, p.hi - q, np.where(s < 0, q - p.lo, 0.0))
        raw = s * frac * headroom
        if self.objective.kind == "target":
            predicted = abs(float(dqif @ raw))
            gap = abs(self.objective.target - ev.q_if)
            if predicted > gap:
                raw *= gap / predicted
        return raw

    def _q_step(self, current: Evaluation, frac: float) -> Tuple[Optional[Evaluation], float]:
        p = self.problem
        if not p.asset_ids or frac < MIN_STEP_FRACTION:
            return None, 0.0
        sens = self._sensitivities(current)
        raw = self._raw_step(current, sens.dqif_dq, frac)
        if not np.any(raw):
            return None, 0.0

        n_bus = len(current.solution.vm)
        margin_lo, margin_hi = np.zeros(n_bus), np.zeros(n_bus)
        index = {b: j for j, b in enumerate(current.solution.bus_ids)}
        for attempt in range(2):
            dq = self._trim(raw, sens.dqif_dq, sens.dv_dq, current.solution, margin_lo, margin_hi)
            if not np.any(np.abs(dq) > 1e-12):
                return None, 0.0
            candidate = p.evaluate(p.clip(np.array(current.q) + dq), current.taps)
            if candidate.feasible and self.objective.value(candidate.q_if) < self.objective.value(current.q_if):
                return candidate, min(1.0, 2.0 * frac)
            voltage_only = candidate.solution is not None and candidate.violations and all(
                v.kind == "voltage" for v in candidate.violations
            )
            if attempt == 0 and voltage_only:
                # correct the linear prediction by the exact overshoot and retry once
                for v in candidate.violations:
                    j = index[v.element]
                    if v.bound == "max":
                        margin_hi[j] += v.magnitude + 1e-9
                    else:
                        margin_lo[j] += v.magnitude + 1e-9
                continue
            break
        return None, frac / 2.0

    def _tap_lookahead(self, current: Evaluation) -> Optional[Evaluation]:
        p = self.problem
        best, best_value = None, self.objective.value(current.q_if) - self.tol
        for tid in p.decision_taps:
            tc = p.net.transformer(tid).tap
            for delta in (1, -1):
                position = current.taps[tid] + delta
                if not tc.within_bounds(position):
                    continue
                moved = dict(current.taps)
                moved[tid] = position
                candidate = p.evaluate(current.q, moved)
                if not candidate.feasible:
                    continue
                options = [candidate]
                follow, _ = self._q_step(candidate, 1.0)
                if follow is not None:
                    options.append(follow)
                for option in options:
                    value = self.objective.value(option.q_if)
                    if value < best_value:
                        best, best_value = option, value
        return best

    def repair(self, current: Evaluation) -> Evaluation:
        """
        Move an infeasible start point toward feasibility with least-squares q corrections
        and single tap moves.

        Raises:
            Infeasible: If no feasible point is reached
        """
        p = self.problem
        best = current
        for _ in range(REPAIR_ITERATIONS):
            if best.feasible or best.solution is None:
                break
            candidates: List[Evaluation] = []
            if p.asset_ids:
                sens = self._sensitivities(best)
                index = {b: j for j, b in enumerate(best.solution.bus_ids)}
                rows, rhs = [], []
                for v in best.violations:
                    if v.kind != "voltage":
                        continue
                    rows.append(index[v.element])
                    sign = 1.0 if v.bound == "min" else -1.0
                    rhs.append(sign * (v.magnitude + REPAIR_MARGIN))
                if rows:
                    dq, *_ = np.linalg.lstsq(sens.dv_dq[rows], np.array(rhs), rcond=None)
                    candidates.append(p.evaluate(p.clip(np.array(best.q) + dq), best.taps))
            for tid in p.decision_taps:
                tc = p.net.transformer(tid).tap
                for delta in (1, -1):
                    if tc.within_bounds(best.taps[tid] + delta):
                        moved = dict(best.taps)
                        moved[tid] += delta
                        candidates.append(p.evaluate(best.q, moved))
            improved = [c for c in candidates if c.violation_total < best.violation_total]
            if not improved:
                break
            best = min(improved, key=lambda c: c.violation_total)
        if best.feasible:
            logger.info(f"Repaired infeasible operating point at interface {p.ifc.transformer_id}")
            return best
        raise Infeasible(f"No constraint-satisfying operating point at interface {p.ifc.transformer_id}",
                         best.violations)
