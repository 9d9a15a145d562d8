"""
Interface flexibility aggregation and Q-target allocation.
"""
import math
import logging
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.grid.network import InterfaceSpec, Network
from src.optimization.constraints import ConstraintSet, FlexRange, Infeasible, OracleTooLarge, SetpointBundle
from src.optimization.search import (
    DEFAULT_MAX_ITER,
    DEFAULT_STEP_FRACTION,
    DEFAULT_TOL,
    FlexProblem,
    Objective,
    SensitivitySearch,
)
from src.optimization.taps import relaxed_taps, round_and_fix_taps

logger = logging.getLogger(__name__)

ORACLE_MAX_TAPS = 3
ORACLE_MAX_ASSETS = 4
DEFAULT_GRID_POINTS = 21
ALLOCATION_TOL = 1e-6

FlexMethod = Callable[..., FlexRange]
_FLEX_METHODS: Dict[str, FlexMethod] = {}


def register_flex_method(name: str) -> Callable[[FlexMethod], FlexMethod]:
    """Make a flexibility method available by name; all share the flex_range_oracle signature head."""

    def decorator(fn: FlexMethod) -> FlexMethod:
        _FLEX_METHODS[name] = fn
        return fn

    return decorator


def get_flex_method(name: str) -> FlexMethod:
    try:
        return _FLEX_METHODS[name]
    except KeyError:
        raise ValueError(f"Unknown flexibility method '{name}', expected one of {sorted(_FLEX_METHODS)}")


def flex_methods() -> List[str]:
    return sorted(_FLEX_METHODS)


def _oracle_points(problem: FlexProblem, grid_resolution: int) -> List[Tuple[Tuple[int, ...], Tuple[float, ...]]]:
    tap_axes = []
    for tid in problem.decision_taps:
        tc = problem.net.transformer(tid).tap
        tap_axes.append(range(tc.pos_min, tc.pos_max + 1))
    q_axes = [
        (float(lo),) if hi - lo <= 0.0 else tuple(float(x) for x in np.linspace(lo, hi, grid_resolution))
        for lo, hi in zip(problem.lo, problem.hi)
    ]
    return [(taps, q) for taps in product(*tap_axes) for q in product(*q_axes)]


def _evaluate_points(args) -> List[Tuple[bool, bool, float]]:
    """Worker entry: (feasible, failed, q_if) per point, in input order."""
    net, ifc, cs, coupling, points = args
    problem = FlexProblem(net, ifc, cs, coupling)
    results = []
    for taps, q in points:
        ev = problem.evaluate(q, dict(zip(problem.decision_taps, taps)))
        results.append((ev.feasible, ev.solution is None, ev.q_if))
    return results


@register_flex_method("oracle")
def flex_range_oracle(
    net: Network,
    ifc: InterfaceSpec,
    cs: ConstraintSet,
    grid_resolution: int = DEFAULT_GRID_POINTS,
    coupling: Optional[Mapping[str, Any]] = None,
    workers: Optional[int] = None,
    **_: Any,
) -> FlexRange:
    """
    Exhaustive flexibility range over all tap combinations and a uniform q grid per asset.

    Args:
        net: Network
        ifc: Interface
        cs: Constraint set; its tap decisions select the enumerated changers
        grid_resolution: Grid points per asset q range
        coupling: Options of the fixed-point loop
        workers: Process count for parallel evaluation; serial when None or 1

    Returns:
        FlexRange: Extremes over the feasible points with their witnesses; feasible=False
            if no point is feasible. Points whose power flow fails are skipped and counted.

    Raises:
        OracleTooLarge: If more than 3 taps or 4 assets would be enumerated
    """
    problem = FlexProblem(net, ifc, cs, coupling)
    if len(problem.decision_taps) > ORACLE_MAX_TAPS or len(problem.asset_ids) > ORACLE_MAX_ASSETS:
        raise OracleTooLarge(
            f"Oracle limited to {ORACLE_MAX_TAPS} taps and {ORACLE_MAX_ASSETS} assets, "
            f"got {len(problem.decision_taps)} taps and {len(problem.asset_ids)} assets"
        )
    points = _oracle_points(problem, grid_resolution)
    logger.info(f"Oracle at {ifc.transformer_id}: enumerating {len(points)} operating points")

    if workers and workers > 1 and len(points) > 1:
        size = math.ceil(len(points) / (workers * 4))
        chunks = [points[i:i + size] for i in range(0, len(points), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcome = [r for part in pool.map(_evaluate_points, [(net, ifc, cs, coupling, c) for c in chunks])
                       for r in part]
    else:
        outcome = _evaluate_points((net, ifc, cs, coupling, points))

    best_min = best_max = None
    skipped = 0
    for k, (feasible, failed, q_if) in enumerate(outcome):
        if failed:
            skipped += 1
            continue
        if not feasible:
            continue
        # strict comparisons keep the first point in enumeration order on ties
        if best_min is None or q_if < outcome[best_min][2]:
            best_min = k
        if best_max is None or q_if > outcome[best_max][2]:
            best_max = k
    if skipped:
        logger.warning(f"Oracle skipped {skipped} points whose power flow failed")

    steps = [(hi - lo) / (grid_resolution - 1) for lo, hi in zip(problem.lo, problem.hi) if grid_resolution > 1]
    grid_step = max(steps, default=0.0)
    if best_min is None:
        base = problem.base()
        return FlexRange.infeasible("oracle", base.violations, len(points), skipped)

    def witness(k: int) -> SetpointBundle:
        taps, q = points[k]
        return problem.bundle(problem.evaluate(q, dict(zip(problem.decision_taps, taps))))

    w_min, w_max = witness(best_min), witness(best_max)
    return FlexRange(w_min.achieved_q_if, w_max.achieved_q_if, w_min, w_max, True, "oracle",
                     len(points), skipped, grid_step)


@register_flex_method("sensitivity")
def flex_range_sensitivity(
    net: Network,
    ifc: InterfaceSpec,
    cs: ConstraintSet,
    coupling: Optional[Mapping[str, Any]] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    initial_step_fraction: float = DEFAULT_STEP_FRACTION,
    **_: Any,
) -> FlexRange:
    """
    Flexibility range by two sensitivity-guided searches, one per direction.

    Args:
        net: Network
        ifc: Interface
        cs: Constraint set
        coupling: Options of the fixed-point loop
        max_iter: Iteration limit per direction
        tol: Stop once an iteration improves the interface Q by less than this
        initial_step_fraction: First step as a share of each asset's remaining headroom

    Returns:
        FlexRange: Both extremes with exactly verified witnesses

    Raises:
        Infeasible: If the base case violates constraints and cannot be repaired
    """
    problem = FlexProblem(net, ifc, cs, coupling)
    results = {}
    for kind in ("min", "max"):
        search = SensitivitySearch(problem, Objective(kind), max_iter, tol, initial_step_fraction)
        results[kind] = search.run()
        logger.debug(f"{kind} search at {ifc.transformer_id} finished after {search.iterations} iterations")
    w_min, w_max = problem.bundle(results["min"]), problem.bundle(results["max"])
    logger.info(f"Flexibility at {ifc.transformer_id}: [{w_min.achieved_q_if:.5f}, {w_max.achieved_q_if:.5f}] pu")
    return FlexRange(w_min.achieved_q_if, w_max.achieved_q_if, w_min, w_max, True, "sensitivity",
                     problem.evaluations)


def _better(a: SetpointBundle, b: SetpointBundle, base_taps: Mapping[str, int]) -> SetpointBundle:
    if abs(a.deviation) < abs(b.deviation) - 1e-9:
        return a
    if abs(b.deviation) < abs(a.deviation) - 1e-9:
        return b
    return a if a.moves_from(base_taps) <= b.moves_from(base_taps) else b


def allocate_setpoints(
    net: Network,
    ifc: InterfaceSpec,
    cs: ConstraintSet,
    q_target: float,
    coupling: Optional[Mapping[str, Any]] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    initial_step_fraction: float = DEFAULT_STEP_FRACTION,
    fixed_taps: Optional[Mapping[str, int]] = None,
) -> SetpointBundle:
    """
    Setpoints and taps that bring the interface Q as close to q_target as the constraints allow.

    Args:
        net: Network
        ifc: Interface
        cs: Constraint set
        q_target: Interface Q target in per-unit
        coupling: Options of the fixed-point loop
        max_iter: Iteration limit of the search
        tol: Improvement threshold of the search
        initial_step_fraction: First step as a share of the remaining headroom
        fixed_taps: Positions pinned for this allocation

    Returns:
        SetpointBundle: Exactly verified allocation; deviation = q_target - achieved_q_if

    Raises:
        Infeasible: If no constraint-satisfying operating point exists
    """
    opts = dict(max_iter=max_iter, tol=tol, initial_step_fraction=initial_step_fraction)
    if fixed_taps:
        net = net.with_taps(fixed_taps)
        cs = cs.with_tap_decisions(cs.tap_decisions - set(fixed_taps))
    problem = FlexProblem(net, ifc, cs, coupling)
    best_ev = SensitivitySearch(problem, Objective("target", q_target), **opts).run()
    bundle = problem.bundle(best_ev, q_target)

    if abs(bundle.deviation) > ALLOCATION_TOL and problem.decision_taps:
        relaxed = relaxed_taps(net, ifc, best_ev, q_target, problem.decision_taps)
        if any(abs(relaxed[t] - best_ev.taps[t]) >= 0.5 for t in relaxed):
            try:
                _, rounded = round_and_fix_taps(net, ifc, cs, q_target, relaxed, coupling, **opts)
                bundle = _better(bundle, rounded, problem.base_taps)
            except Infeasible:
                logger.debug("Rounded tap candidates infeasible, keeping the search result")

    logger.info(
        f"Allocation at {ifc.transformer_id}: target {q_target:.5f}, achieved {bundle.achieved_q_if:.5f}, "
        f"deviation {bundle.deviation:.2e} pu"
    )
    return bundle
