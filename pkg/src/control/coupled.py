"""
Fixed-point coupling of voltage-dependent reactive power laws with the power flow.
"""
import logging
from dataclasses import replace
from typing import Collection, Dict, List, Mapping, Optional

import numpy as np

from src.control.characteristics import (
    FallbackMode,
    ControlCharacteristic,
    eval_characteristic,
    fallback_law,
    is_voltage_dependent,
)
from src.grid.network import Asset, Network
from src.powerflow.solver import PowerFlowError, PowerFlowOptions, PowerFlowSolution, solve_power_flow

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5
DEFAULT_TOL = 1e-6
DEFAULT_MAX_OUTER = 100


class FixedPointDivergence(PowerFlowError):
    def __init__(self, amplitude: float, iterations: int):
        self.amplitude = amplitude
        self.iterations = iterations
        super().__init__(
            f"Voltage control fixed point not reached after {iterations} iterations "
            f"(oscillation amplitude {amplitude:.3e} pu)"
        )


def active_law(
    asset: Asset,
    fallback_assets: Collection[str] = (),
    mode: FallbackMode = FallbackMode.PROFILE,
) -> ControlCharacteristic:
    """The law an asset follows right now: its fallback law when cut off, else its configured control."""
    if asset.id in fallback_assets:
        return fallback_law(asset, mode)
    return asset.control


def coupled_power_flow(
    net: Network,
    dispatch_overrides: Optional[Mapping[str, float]] = None,
    taps: Optional[Mapping[str, int]] = None,
    fallback_assets: Collection[str] = (),
    fallback_mode: FallbackMode = FallbackMode.PROFILE,
    alpha: float = DEFAULT_ALPHA,
    tol: float = DEFAULT_TOL,
    max_outer: int = DEFAULT_MAX_OUTER,
    pf_opts: Optional[PowerFlowOptions] = None,
    initial: Optional[PowerFlowSolution] = None,
) -> PowerFlowSolution:
    """
    Solve the power flow with every Q(V) asset at its self-consistent operating point.

    Damped Picard iteration q <- (1 - alpha) q + alpha char(v). The returned solution is the
    last power flow computed, so its dispatch holds exactly the q values it was solved with.

    Args:
        net: Network in per-unit
        dispatch_overrides: q setpoints by asset id; they win over any characteristic
        taps: Tap positions; current positions when omitted
        fallback_assets: Assets that lost their central setpoint and follow their fallback law
        fallback_mode: Which fallback law those assets use
        alpha: Damping factor
        tol: Convergence threshold on max |char(v) - q|
        max_outer: Outer iteration limit
        pf_opts: Options for the inner Newton-Raphson solves
        initial: Solution of a nearby operating point of the same network; its voltages and Q(V)
            outputs seed the iteration

    Returns:
        PowerFlowSolution: Solution at the fixed point; fixed_point_iterations is set

    Raises:
        FixedPointDivergence: If the fixed point is not reached within max_outer iterations
        NonConvergence: Propagated from the inner power flow
    """
    overrides = dispatch_overrides or {}
    pf_opts = pf_opts or PowerFlowOptions()
    idx = net.bus_index

    dispatch: Dict[str, tuple] = {}
    dependent: List[Asset] = []
    laws: Dict[str, ControlCharacteristic] = {}
    for a in net.assets:
        if a.id in overrides:
            dispatch[a.id] = (a.p, a.limits.clamp(float(overrides[a.id]), a.p))
            continue
        law = active_law(a, fallback_assets, fallback_mode)
        laws[a.id] = law
        if is_voltage_dependent(law):
            dependent.append(a)
        if initial is not None and is_voltage_dependent(law) and a.id in initial.dispatch:
            dispatch[a.id] = (a.p, a.limits.clamp(initial.dispatch[a.id][1], a.p))
        else:
            # voltage-dependent laws start from their value at 1.0 pu
            dispatch[a.id] = (a.p, eval_characteristic(law, 1.0, a.p, a.limits))

    warm = replace(pf_opts, flat_start=False)
    if initial is not None and len(initial.v) == len(net.buses):
        sol = solve_power_flow(net, dispatch, taps, warm, initial_voltage=initial.v)
    else:
        sol = solve_power_flow(net, dispatch, taps, pf_opts)
    if not dependent:
        return replace(sol, fixed_point_iterations=1)

    q = np.array([dispatch[a.id][1] for a in dependent])
    history: List[np.ndarray] = []
    for outer in range(1, max_outer + 1):
        target = np.array([
            eval_characteristic(laws[a.id], float(sol.vm[idx[a.bus]]), a.p, a.limits) for a in dependent
        ])
        gap = float(np.max(np.abs(target - q)))
        logger.debug(f"Picard iteration {outer}: max |char(v) - q| = {gap:.3e}")
        if gap <= tol:
            return replace(sol, fixed_point_iterations=outer)
        q = (1.0 - alpha) * q + alpha * target
        history.append(q.copy())
        for a, qa in zip(dependent, q):
            dispatch[a.id] = (a.p, float(qa))
        sol = solve_power_flow(net, dispatch, taps, warm, initial_voltage=sol.v)

    tail = np.array(history[-10:])
    amplitude = float(np.max(tail.max(axis=0) - tail.min(axis=0)))
    raise FixedPointDivergence(amplitude, max_outer)
