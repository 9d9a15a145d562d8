"""Newton-Raphson AC power flow in polar form."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix, diags

from src.grid.network import InterfaceSpec, Network, TapVector
from src.powerflow.admittance import BranchModel, admittance_from_branches, branch_model, check_taps

logger = logging.getLogger(__name__)

Dispatch = Dict[str, Tuple[float, float]]


class PowerFlowError(Exception):
    """Base class for power flow failures."""


class NonConvergence(PowerFlowError):
    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"Power flow did not converge after {iterations} iterations (residual {residual:.3e} pu)")


class SingularJacobian(PowerFlowError):
    pass


@dataclass(frozen=True)
class PowerFlowOptions:
    tol: float = 1e-8
    max_iter: int = 50
    flat_start: bool = True


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    bus_ids: Tuple[str, ...]
    vm: np.ndarray
    va: np.ndarray
    branch_ids: Tuple[str, ...]
    from_idx: np.ndarray
    to_idx: np.ndarray
    s_from: np.ndarray
    s_to: np.ndarray
    slack_injection: complex
    iterations: int
    max_residual: float
    dispatch: Dispatch = field(default_factory=dict)
    taps: TapVector = field(default_factory=dict)
    fixed_point_iterations: int = 0

    @property
    def v(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def voltage(self, bus_id: str) -> float:
        return float(self.vm[self.bus_ids.index(bus_id)])

    def voltages(self) -> Dict[str, float]:
        return {b: float(v) for b, v in zip(self.bus_ids, self.vm)}

    def branch_flow(self, branch_id: str) -> Tuple[complex, complex]:
        k = self.branch_ids.index(branch_id)
        return complex(self.s_from[k]), complex(self.s_to[k])

    def branch_currents(self) -> Tuple[np.ndarray, np.ndarray]:
        """Current magnitudes at both ends in per-unit."""
        return np.abs(self.s_from) / self.vm[self.from_idx], np.abs(self.s_to) / self.vm[self.to_idx]

    @property
    def branch_losses(self) -> np.ndarray:
        return self.s_from + self.s_to

    @property
    def losses(self) -> complex:
        return complex(np.sum(self.branch_losses))


def bus_injections(net: Network, dispatch: Mapping[str, Tuple[float, float]]) -> np.ndarray:
    missing = sorted(a.id for a in net.assets if a.id not in dispatch)
    if missing:
        raise ValueError(f"Dispatch is missing assets: {', '.join(missing)}")
    s_bus = np.zeros(len(net.buses), dtype=complex)
    idx = net.bus_index
    for a in net.assets:
        p, q = dispatch[a.id]
        s_bus[idx[a.bus]] += complex(p, q)
    return s_bus


def _jacobian(y_bus: csr_matrix, v: np.ndarray, pq: np.ndarray) -> np.ndarray:
    i_bus = y_bus @ v
    diag_v = diags(v)
    diag_i = diags(i_bus)
    diag_vnorm = diags(v / np.abs(v))
    ds_dvm = diag_v @ (y_bus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_i - y_bus @ diag_v).conj()
    ds_dvm = ds_dvm.tocsr()[pq][:, pq].toarray()
    ds_dva = ds_dva.tocsr()[pq][:, pq].toarray()
    return np.block([[ds_dva.real, ds_dvm.real], [ds_dva.imag, ds_dvm.imag]])


def reduced_jacobian(net: Network, sol: PowerFlowSolution) -> Tuple[np.ndarray, np.ndarray]:
    """Jacobian over the non-slack buses at a solution, plus the index array of those buses."""
    branches = branch_model(net, sol.taps or None)
    y_bus = admittance_from_branches(branches, len(net.buses))
    slack = net.bus_index[net.slack_bus.id]
    pq = np.array([i for i in range(len(net.buses)) if i != slack], dtype=int)
    return _jacobian(y_bus, sol.v, pq), pq


def _branch_flows(branches: BranchModel, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    vf, vt = v[branches.from_idx], v[branches.to_idx]
    i_f = branches.yff * vf + branches.yft * vt
    i_t = branches.ytf * vf + branches.ytt * vt
    return vf * np.conj(i_f), vt * np.conj(i_t)


def solve_power_flow(
    net: Network,
    dispatch: Mapping[str, Tuple[float, float]],
    taps: Optional[Mapping[str, int]] = None,
    opts: Optional[PowerFlowOptions] = None,
    initial_voltage: Optional[np.ndarray] = None,
) -> PowerFlowSolution:
    """
    Solve the AC power flow with a full Newton-Raphson method.

    Args:
        net: Network in per-unit
        dispatch: (p, q) injection of every asset, generation positive
        taps: Tap positions by transformer id; current positions when omitted
        opts: Tolerance, iteration limit and start strategy
        initial_voltage: Complex start vector used when opts.flat_start is False

    Returns:
        PowerFlowSolution: Converged bus voltages and branch flows. `iterations` counts
            mismatch evaluations, so an already balanced flat start reports 1.

    Raises:
        NonConvergence: If the mismatch is not below tol within max_iter iterations
        SingularJacobian: If the Jacobian at the start point cannot be factorized
    """
    opts = opts or PowerFlowOptions()
    taps_used: TapVector = dict(net.taps)
    if taps:
        check_taps(net, taps)
        taps_used.update({k: int(v) for k, v in taps.items()})

    branches = branch_model(net, taps_used)
    n_bus = len(net.buses)
    y_bus = admittance_from_branches(branches, n_bus)
    s_bus = bus_injections(net, dispatch)

    slack = net.bus_index[net.slack_bus.id]
    pq = np.array([i for i in range(n_bus) if i != slack], dtype=int)
    n_pq = len(pq)

    if opts.flat_start or initial_voltage is None:
        vm = np.ones(n_bus)
        va = np.zeros(n_bus)
    else:
        vm = np.abs(initial_voltage).astype(float)
        va = np.angle(initial_voltage).astype(float)
    vm[slack] = net.slack_bus.v_set
    va[slack] = 0.0
    v = vm * np.exp(1j * va)

    residual = np.inf
    converged = False
    iterations = 0
    with np.errstate(all="ignore"):
        for iterations in range(1, opts.max_iter + 1):
            mismatch = v * np.conj(y_bus @ v) - s_bus
            f = np.concatenate([mismatch[pq].real, mismatch[pq].imag])
            residual = float(np.max(np.abs(f))) if n_pq else 0.0
            if not np.isfinite(residual):
                break
            logger.debug(f"NR iteration {iterations}: residual {residual:.3e}")
            if residual <= opts.tol:
                converged = True
                break
            jac = _jacobian(y_bus, v, pq)
            try:
                dx = np.linalg.solve(jac, -f)
            except np.linalg.LinAlgError:
                if iterations == 1:
                    raise SingularJacobian("Power flow Jacobian is singular at the start point")
                # a diverging iterate ran into a singular point
                break
            va[pq] += dx[:n_pq]
            vm[pq] += dx[n_pq:]
            v = vm * np.exp(1j * va)

    if not converged:
        raise NonConvergence(iterations, residual)

    s_from, s_to = _branch_flows(branches, v)
    s_calc = v * np.conj(y_bus @ v)
    return PowerFlowSolution(
        bus_ids=tuple(b.id for b in net.buses),
        vm=np.abs(v),
        va=np.angle(v),
        branch_ids=branches.ids,
        from_idx=branches.from_idx,
        to_idx=branches.to_idx,
        s_from=s_from,
        s_to=s_to,
        slack_injection=complex(s_calc[slack] - s_bus[slack]),
        iterations=iterations,
        max_residual=residual,
        dispatch={k: (float(p), float(q)) for k, (p, q) in dispatch.items()},
        taps=taps_used,
    )


def interface_q(sol: PowerFlowSolution, ifc: InterfaceSpec) -> float:
    """
    Reactive flow over an interface transformer, measured on its HV side.

    Args:
        sol: Power flow solution of the network the interface belongs to
        ifc: Interface description

    Returns:
        float: Q in per-unit, positive when flowing from HV to LV
    """
    s_from, _ = sol.branch_flow(ifc.transformer_id)
    return float(s_from.imag)


def interface_p(sol: PowerFlowSolution, ifc: InterfaceSpec) -> float:
    s_from, _ = sol.branch_flow(ifc.transformer_id)
    return float(s_from.real)
