"""Discrete tap handling: fractional estimates, rounding and re-dispatch."""
import math
import logging
from itertools import product
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.grid.network import InterfaceSpec, Network, TapVector
from src.optimization.constraints import ConstraintSet, Infeasible, SetpointBundle
from src.optimization.search import Evaluation, FlexProblem, Objective, SensitivitySearch
from src.powerflow.sensitivity import sensitivities

logger = logging.getLogger(__name__)

INTEGRAL_TOL = 1e-9
TIE_TOL = 1e-8


def relaxed_taps(net: Network, ifc: InterfaceSpec, ev: Evaluation, q_target: float,
                 tap_ids: Sequence[str]) -> Dict[str, float]:
    """
    Fractional tap positions that close the remaining gap to q_target to first order.

    Uses the minimum-norm move along the secant dQif/dtap, clipped to the tap bounds.
    """
    current = {tid: float(ev.taps[tid]) for tid in tap_ids}
    if not tap_ids or ev.solution is None:
        return current
    sens = sensitivities(net, ev.solution, ifc, ev.taps, asset_ids=(), tap_ids=tuple(tap_ids))
    g = sens.dqif_dtap
    norm = float(g @ g)
    if norm <= 0.0:
        return current
    move = g * (q_target - ev.q_if) / norm
    relaxed = {}
    for tid, delta in zip(tap_ids, move):
        tc = net.transformer(tid).tap
        relaxed[tid] = float(np.clip(current[tid] + delta, tc.pos_min, tc.pos_max))
    return relaxed


def _candidates(net: Network, tid: str, fractional: float) -> List[int]:
    tc = net.transformer(tid).tap
    if abs(fractional - round(fractional)) <= INTEGRAL_TOL:
        return [int(round(fractional))]
    return [pos for pos in (math.floor(fractional), math.ceil(fractional)) if tc.within_bounds(pos)]


def rank_tap_combinations(net: Network, tap_ids: Sequence[str], combos: Sequence[Tuple[int, ...]],
                          predicted: Sequence[float]) -> List[Tuple[int, ...]]:
    """
    Order combinations by predicted objective; within TIE_TOL the one closer to neutral wins.
    """
    neutral = [net.transformer(tid).tap.neutral for tid in tap_ids]
    order = sorted(range(len(combos)), key=lambda k: predicted[k])
    ranked: List[Tuple[int, ...]] = []
    group: List[int] = []

    def flush():
        group.sort(key=lambda k: (sum(abs(c - n) for c, n in zip(combos[k], neutral)), combos[k]))
        ranked.extend(combos[k] for k in group)
        group.clear()

    for k in order:
        if group and predicted[k] - predicted[group[0]] > TIE_TOL:
            flush()
        group.append(k)
    flush()
    return ranked


def round_and_fix_taps(
    net: Network,
    ifc: InterfaceSpec,
    cs: ConstraintSet,
    q_target: float,
    relaxed: Mapping[str, float],
    coupling: Optional[Mapping[str, Any]] = None,
    **search_opts: Any,
) -> Tuple[TapVector, SetpointBundle]:
    """
    Turn fractional tap positions into integers and re-dispatch the assets.

    Args:
        net: Network
        ifc: Interface the target refers to
        cs: Constraint set
        q_target: Interface Q target in per-unit
        relaxed: Fractional position per tap changer
        coupling: Options of the fixed-point loop
        **search_opts: max_iter, tol, initial_step_fraction of the continuous allocation

    Returns:
        Tuple[TapVector, SetpointBundle]: Chosen positions and the allocation with them fixed

    Raises:
        Infeasible: If no candidate combination admits a feasible dispatch
    """
    tap_ids = list(relaxed)
    for tid, x in relaxed.items():
        tc = net.transformer(tid).tap
        if not tc.pos_min - INTEGRAL_TOL <= x <= tc.pos_max + INTEGRAL_TOL:
            raise ValueError(f"Fractional tap {x} of {tid} outside [{tc.pos_min}, {tc.pos_max}]")
    combos = list(product(*(_candidates(net, tid, relaxed[tid]) for tid in tap_ids)))

    predicted = [0.0] * len(combos)
    if len(combos) > 1:
        base = FlexProblem(net, ifc, cs.with_tap_decisions(tap_ids), coupling).base()
        if base.solution is not None:
            sens = sensitivities(net, base.solution, ifc, base.taps, asset_ids=(), tap_ids=tuple(tap_ids))
            for k, combo in enumerate(combos):
                shift = sum(g * (c - base.taps[tid]) for g, c, tid in zip(sens.dqif_dtap, combo, tap_ids))
                predicted[k] = abs(q_target - (base.q_if + shift))
    ranked = rank_tap_combinations(net, tap_ids, combos, predicted)

    last_violations = []
    for combo in ranked:
        fixed = dict(zip(tap_ids, combo))
        problem = FlexProblem(net, ifc, cs, coupling, fixed_taps=fixed)
        try:
            best = SensitivitySearch(problem, Objective("target", q_target), allow_taps=False, **search_opts).run()
        except Infeasible as e:
            last_violations = e.violations
            logger.debug(f"Tap combination {fixed} infeasible")
            continue
        return fixed, problem.bundle(best, q_target)
    raise Infeasible(f"No tap combination admits a feasible dispatch at {ifc.transformer_id}", last_violations)
