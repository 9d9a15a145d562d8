"""Nodal admittance matrix and per-branch two-port parameters."""
import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from src.grid.network import Network

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BranchModel:
    """
    Two-port admittances of every branch, lines first then transformers.

    For a transformer the `from` end is the HV bus. The tap ratio t sits on the HV side and
    scales the HV voltage seen by the series impedance, so a higher position raises the LV
    voltage: yff = t^2 ys, yft = ytf = -t ys, ytt = ys.
    """

    ids: Tuple[str, ...]
    is_transformer: np.ndarray
    from_idx: np.ndarray
    to_idx: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray


def tap_ratio(net: Network, transformer_id: str, taps: Optional[Mapping[str, int]] = None) -> float:
    t = net.transformer(transformer_id)
    if t.tap is None:
        return 1.0
    position = t.tap.position if taps is None else taps.get(transformer_id, t.tap.position)
    return t.tap.ratio(position)


def check_taps(net: Network, taps: Mapping[str, int]) -> None:
    for tid, pos in taps.items():
        t = net.transformer(tid)
        if t.tap is None:
            raise ValueError(f"Transformer {tid} has no tap changer")
        if not t.tap.within_bounds(pos):
            raise ValueError(f"Tap position {pos} of {tid} outside [{t.tap.pos_min}, {t.tap.pos_max}]")


def branch_model(net: Network, taps: Optional[Mapping[str, int]] = None) -> BranchModel:
    idx = net.bus_index
    ids, is_trafo, f, t = [], [], [], []
    yff, yft, ytf, ytt = [], [], [], []

    for ln in net.lines:
        ys = 1.0 / complex(ln.r, ln.x)
        ysh = 0.5j * ln.b_shunt
        ids.append(ln.id)
        is_trafo.append(False)
        f.append(idx[ln.from_bus])
        t.append(idx[ln.to_bus])
        yff.append(ys + ysh)
        yft.append(-ys)
        ytf.append(-ys)
        ytt.append(ys + ysh)

    for tr in net.transformers:
        # r, x are given on the transformer's own rating
        scale = net.s_base / tr.s_rated
        ys = 1.0 / complex(tr.r * scale, tr.x * scale)
        ratio = tap_ratio(net, tr.id, taps)
        ids.append(tr.id)
        is_trafo.append(True)
        f.append(idx[tr.hv_bus])
        t.append(idx[tr.lv_bus])
        yff.append(ratio * ratio * ys)
        yft.append(-ratio * ys)
        ytf.append(-ratio * ys)
        ytt.append(ys)

    return BranchModel(
        ids=tuple(ids),
        is_transformer=np.array(is_trafo, dtype=bool),
        from_idx=np.array(f, dtype=int),
        to_idx=np.array(t, dtype=int),
        yff=np.array(yff, dtype=complex),
        yft=np.array(yft, dtype=complex),
        ytf=np.array(ytf, dtype=complex),
        ytt=np.array(ytt, dtype=complex),
    )


def admittance_from_branches(branches: BranchModel, n_bus: int) -> csr_matrix:
    f, t = branches.from_idx, branches.to_idx
    rows = np.concatenate([f, f, t, t])
    cols = np.concatenate([f, t, f, t])
    data = np.concatenate([branches.yff, branches.yft, branches.ytf, branches.ytt])
    # duplicate entries are summed on conversion
    return coo_matrix((data, (rows, cols)), shape=(n_bus, n_bus)).tocsr()


def build_admittance(net: Network, taps: Optional[Mapping[str, int]] = None) -> csr_matrix:
    """
    Build the nodal admittance matrix for the given tap positions.

    Args:
        net: Network in per-unit
        taps: Tap positions by transformer id; current positions when omitted

    Returns:
        csr_matrix: Complex n_bus x n_bus admittance matrix with symmetric sparsity

    Raises:
        ValueError: If a tap position is outside its changer's bounds
    """
    if taps:
        check_taps(net, taps)
    return admittance_from_branches(branch_model(net, taps), len(net.buses))
