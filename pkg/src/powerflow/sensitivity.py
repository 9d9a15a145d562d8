"""
First-order sensitivities of bus voltages and interface Q to asset Q and tap positions.
"""
import logging
from dataclasses import dataclass
from typing import Collection, Dict, Optional, Sequence, Tuple

import numpy as np

from src.control.characteristics import FallbackMode, eval_characteristic, is_voltage_dependent
from src.control.coupled import active_law, coupled_power_flow
from src.grid.network import InterfaceSpec, Network
from src.powerflow.admittance import branch_model
from src.powerflow.solver import PowerFlowSolution, SingularJacobian, interface_q, reduced_jacobian

logger = logging.getLogger(__name__)

SLOPE_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class SensitivityMatrices:
    """
    Rows of dv_dq and dv_dtap follow bus_ids; columns follow asset_ids and tap_ids.
    Tap columns are secants over one step, expressed per +1 position.
    """

    bus_ids: Tuple[str, ...]
    asset_ids: Tuple[str, ...]
    tap_ids: Tuple[str, ...]
    dv_dq: np.ndarray
    dqif_dq: np.ndarray
    dv_dtap: np.ndarray
    dqif_dtap: np.ndarray

    def dv(self, bus_id: str, asset_id: str) -> float:
        return float(self.dv_dq[self.bus_ids.index(bus_id), self.asset_ids.index(asset_id)])


def _bus_sensitivities(net: Network, sol: PowerFlowSolution, ifc: Optional[InterfaceSpec]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Open-loop sensitivities to a reactive injection at each bus.

    Returns:
        Tuple[np.ndarray, np.ndarray]: dVm/dQ_bus (n_bus x n_bus) and dQif/dQ_bus (n_bus)
    """
    n_bus = len(net.buses)
    jac, pq = reduced_jacobian(net, sol)
    n_pq = len(pq)
    if n_pq == 0:
        return np.zeros((n_bus, n_bus)), np.zeros(n_bus)
    try:
        inv = np.linalg.inv(jac)
    except np.linalg.LinAlgError:
        raise SingularJacobian("Jacobian at the solution is singular")

    # dx/dQ_bus: the Q-injection columns of the inverse
    dx_dq = inv[:, n_pq:]
    dva = np.zeros((n_bus, n_bus))
    dvm = np.zeros((n_bus, n_bus))
    dva[np.ix_(pq, pq)] = dx_dq[:n_pq]
    dvm[np.ix_(pq, pq)] = dx_dq[n_pq:]

    dqif = np.zeros(n_bus)
    if ifc is not None:
        branches = branch_model(net, sol.taps)
        k = branches.ids.index(ifc.transformer_id)
        f, t = branches.from_idx[k], branches.to_idx[k]
        yff, yft = branches.yff[k], branches.yft[k]
        v = sol.v
        vf, vt = v[f], v[t]
        i_f = yff * vf + yft * vt
        dsf_dva_f = 1j * vf * np.conj(i_f) - 1j * abs(vf) ** 2 * np.conj(yff)
        dsf_dva_t = -1j * vf * np.conj(yft * vt)
        dsf_dvm_f = vf / abs(vf) * np.conj(i_f) + abs(vf) * np.conj(yff)
        dsf_dvm_t = vf * np.conj(yft * vt / abs(vt))
        dsf = dsf_dva_f * dva[f] + dsf_dva_t * dva[t] + dsf_dvm_f * dvm[f] + dsf_dvm_t * dvm[t]
        dqif = np.imag(dsf)
    return dvm, dqif


def _local_slopes(net: Network, sol: PowerFlowSolution, fallback_assets: Collection[str],
                  mode: FallbackMode, exclude: Collection[str]) -> np.ndarray:
    """Diagonal n_bus x n_bus matrix of dq/dV summed over the voltage-dependent assets at each bus."""
    d = np.zeros(len(net.buses))
    idx = net.bus_index
    for a in net.assets:
        if a.id in exclude:
            continue
        law = active_law(a, fallback_assets, mode)
        if not is_voltage_dependent(law):
            continue
        v = float(sol.vm[idx[a.bus]])
        hi = eval_characteristic(law, v + SLOPE_STEP, a.p, a.limits)
        lo = eval_characteristic(law, v - SLOPE_STEP, a.p, a.limits)
        d[idx[a.bus]] += (hi - lo) / (2 * SLOPE_STEP)
    return np.diag(d)


def sensitivities(
    net: Network,
    sol: PowerFlowSolution,
    ifc: Optional[InterfaceSpec],
    taps: Optional[Dict[str, int]] = None,
    asset_ids: Optional[Sequence[str]] = None,
    tap_ids: Optional[Sequence[str]] = None,
    fallback_assets: Collection[str] = (),
    fallback_mode: FallbackMode = FallbackMode.PROFILE,
    include_local_control: bool = True,
) -> SensitivityMatrices:
    """
    Compute voltage and interface Q sensitivities at a converged solution.

    Asset columns come from the inverse of the reduced Newton Jacobian. When
    include_local_control is set, the local slopes of Q(V) assets close the loop, so the
    columns describe the response after those assets settle. Tap columns re-solve the
    coupled power flow one step away.

    Args:
        net: Network the solution belongs to
        sol: Converged (coupled) power flow solution
        ifc: Interface whose Q flow is differentiated; None skips those rows
        taps: Tap vector of the solution; sol.taps when omitted
        asset_ids: Columns; the interface's controllable assets when omitted
        tap_ids: Tap columns; the interface's tap changers when omitted
        fallback_assets: Assets currently on their fallback law
        fallback_mode: Fallback law selection
        include_local_control: Close the loop over voltage-dependent assets

    Returns:
        SensitivityMatrices: dV/dQ, dQif/dQ, dV/dtap and dQif/dtap

    Raises:
        SingularJacobian: If the Jacobian at the solution is singular
    """
    taps = dict(taps if taps is not None else sol.taps)
    if asset_ids is None:
        asset_ids = ifc.controllable_assets if ifc is not None else ()
    if tap_ids is None:
        tap_ids = ifc.tap_changers if ifc is not None else ()
    asset_ids, tap_ids = tuple(asset_ids), tuple(tap_ids)
    n_bus = len(net.buses)
    idx = net.bus_index

    dvm_bus, dqif_bus = _bus_sensitivities(net, sol, ifc)
    if include_local_control:
        slopes = _local_slopes(net, sol, fallback_assets, fallback_mode, exclude=asset_ids)
        if np.any(slopes):
            # dV = S (e_k dQ + D dV)  =>  dV = (I - S D)^-1 S e_k dQ
            closed = np.linalg.solve(np.eye(n_bus) - dvm_bus @ slopes, dvm_bus)
            dqif_bus = dqif_bus + dqif_bus @ slopes @ closed
            dvm_bus = closed

    cols = [idx[net.asset(a).bus] for a in asset_ids]
    dv_dq = dvm_bus[:, cols] if cols else np.zeros((n_bus, 0))
    dqif_dq = dqif_bus[cols] if cols else np.zeros(0)

    dv_dtap = np.zeros((n_bus, len(tap_ids)))
    dqif_dtap = np.zeros(len(tap_ids))
    if tap_ids:
        overrides = {
            a.id: sol.dispatch[a.id][1]
            for a in net.assets
            if a.directly_controllable and a.id not in fallback_assets and a.id in sol.dispatch
        }
        q_base = interface_q(sol, ifc) if ifc is not None else 0.0
        for j, tid in enumerate(tap_ids):
            tc = net.transformer(tid).tap
            step = 1 if tc.within_bounds(taps[tid] + 1) else -1
            if not tc.within_bounds(taps[tid] + step):
                continue
            moved = dict(taps)
            moved[tid] = taps[tid] + step
            other = coupled_power_flow(net, overrides, moved, fallback_assets, fallback_mode)
            dv_dtap[:, j] = (other.vm - sol.vm) / step
            if ifc is not None:
                dqif_dtap[j] = (interface_q(other, ifc) - q_base) / step

    return SensitivityMatrices(
        bus_ids=sol.bus_ids,
        asset_ids=asset_ids,
        tap_ids=tap_ids,
        dv_dq=dv_dq,
        dqif_dq=dqif_dq,
        dv_dtap=dv_dtap,
        dqif_dtap=dqif_dtap,
    )
