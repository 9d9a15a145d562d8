import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

import networkx as nx

from src.control.characteristics import (
    ControlCharacteristic,
    DirectSetpoint,
    FallbackProfile,
    FixedCosPhi,
    QLimits,
    QofP,
    QofV,
    admits_setpoint,
    check_breakpoints,
)

logger = logging.getLogger(__name__)

TapVector = Dict[str, int]

DEFAULT_V_MIN = 0.90
DEFAULT_V_MAX = 1.10
DEFAULT_S_BASE_MVA = 10.0

# Q positive when flowing from the higher to the lower voltage level, measured on the HV side
SIGN_CONVENTION = "q_positive_hv_to_lv"


class GridError(Exception):
    """Base class for grid model errors."""


class GridFileError(GridError):
    """Raised when a grid file cannot be parsed or does not match the schema."""

    def __init__(self, message: str, problems: Optional[List[str]] = None):
        self.problems = problems or []
        detail = "; ".join(self.problems)
        super().__init__(f"{message}: {detail}" if detail else message)


class NetworkValidationError(GridError):
    """Raised by load_network when the validation report contains errors."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__("Network validation failed: " + "; ".join(report.errors))


class InterfaceError(GridError, ValueError):
    """Raised for unknown or non-interface transformer ids."""


class BusKind(str, Enum):
    SLACK = "slack"
    LOAD = "load"


class VoltageLevel(str, Enum):
    HV = "HV"
    MV = "MV"
    LV = "LV"

    @property
    def rank(self) -> int:
        return {"HV": 3, "MV": 2, "LV": 1}[self.value]


class AssetKind(str, Enum):
    PV = "pv"
    WIND = "wind"
    STORAGE = "storage"
    EV_CHARGING = "ev_charging"
    HOUSEHOLD = "household"
    COMMERCIAL = "commercial"
    # equivalent injection standing in for a whole substation in the MV master problem
    AGGREGATE = "aggregate"


DER_KINDS = frozenset({AssetKind.PV, AssetKind.WIND, AssetKind.STORAGE, AssetKind.EV_CHARGING})


@dataclass(frozen=True)
class Bus:
    id: str
    kind: BusKind
    base_kv: float
    v_min: float = DEFAULT_V_MIN
    v_max: float = DEFAULT_V_MAX
    level: VoltageLevel = VoltageLevel.MV
    v_set: float = 1.0


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    b_shunt: float = 0.0
    i_max: float = math.inf


@dataclass(frozen=True)
class TapChanger:
    pos_min: int
    pos_max: int
    neutral: int
    step_size: float
    position: int
    v_setpoint: float = 1.0
    deadband: float = 0.015
    delay_steps: int = 1

    def ratio(self, position: Optional[int] = None) -> float:
        pos = self.position if position is None else position
        return 1.0 + (pos - self.neutral) * self.step_size

    def within_bounds(self, position: float) -> bool:
        return self.pos_min <= position <= self.pos_max


@dataclass(frozen=True)
class Transformer:
    id: str
    hv_bus: str
    lv_bus: str
    s_rated: float
    r: float
    x: float
    tap: Optional[TapChanger] = None
    is_interface: bool = False


@dataclass(frozen=True)
class Asset:
    id: str
    bus: str
    kind: AssetKind
    p: float
    q_min: float = -math.inf
    q_max: float = math.inf
    s_max: float = math.inf
    control: ControlCharacteristic = field(default_factory=FixedCosPhi)
    directly_controllable: bool = False

    @property
    def limits(self) -> QLimits:
        return QLimits(self.q_min, self.q_max, self.s_max)

    def q_bounds(self, p: Optional[float] = None) -> Tuple[float, float]:
        return self.limits.bounds(self.p if p is None else p)


@dataclass(frozen=True)
class ValidationReport:
    errors: Tuple[str, ...] = ()
    warnings: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def __str__(self) -> str:
        lines = [f"ERROR: {e}" for e in self.errors] + [f"WARNING: {w}" for w in self.warnings]
        return "\n".join(lines) if lines else "OK"


@dataclass(frozen=True)
class InterfaceSpec:
    """A transformer boundary at which aggregated reactive power is measured."""

    transformer_id: str
    measurement_bus: str
    lv_bus: str
    downstream_buses: FrozenSet[str]
    controllable_assets: Tuple[str, ...]
    voltage_dependent_assets: Tuple[str, ...]
    tap_changers: Tuple[str, ...]
    sign_convention: str = SIGN_CONVENTION


@dataclass(frozen=True)
class Network:
    buses: Tuple[Bus, ...]
    lines: Tuple[Line, ...] = ()
    transformers: Tuple[Transformer, ...] = ()
    assets: Tuple[Asset, ...] = ()
    s_base: float = DEFAULT_S_BASE_MVA

    @cached_property
    def bus_index(self) -> Dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def _buses_by_id(self) -> Dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def _assets_by_id(self) -> Dict[str, Asset]:
        return {a.id: a for a in self.assets}

    @cached_property
    def _transformers_by_id(self) -> Dict[str, Transformer]:
        return {t.id: t for t in self.transformers}

    @cached_property
    def _lines_by_id(self) -> Dict[str, Line]:
        return {ln.id: ln for ln in self.lines}

    def bus(self, bus_id: str) -> Bus:
        return self._buses_by_id[bus_id]

    def asset(self, asset_id: str) -> Asset:
        return self._assets_by_id[asset_id]

    def transformer(self, transformer_id: str) -> Transformer:
        return self._transformers_by_id[transformer_id]

    def line(self, line_id: str) -> Line:
        return self._lines_by_id[line_id]

    def has_asset(self, asset_id: str) -> bool:
        return asset_id in self._assets_by_id

    def has_transformer(self, transformer_id: str) -> bool:
        return transformer_id in self._transformers_by_id

    @property
    def slack_bus(self) -> Bus:
        slacks = [b for b in self.buses if b.kind is BusKind.SLACK]
        if len(slacks) != 1:
            raise GridError(f"Network has {len(slacks)} slack buses, expected exactly one")
        return slacks[0]

    @property
    def taps(self) -> TapVector:
        """Current tap positions of every tap-changing transformer."""
        return {t.id: t.tap.position for t in self.transformers if t.tap is not None}

    @property
    def tap_changers(self) -> Dict[str, TapChanger]:
        return {t.id: t.tap for t in self.transformers if t.tap is not None}

    def assets_at(self, bus_ids: Iterable[str]) -> List[Asset]:
        wanted = set(bus_ids)
        return [a for a in self.assets if a.bus in wanted]

    @cached_property
    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(b.id for b in self.buses)
        for ln in self.lines:
            g.add_edge(ln.from_bus, ln.to_bus, element=ln.id)
        for t in self.transformers:
            g.add_edge(t.hv_bus, t.lv_bus, element=t.id)
        return g

    # -- copy helpers; the network itself is never mutated --------------------------

    def with_asset_power(self, p: Mapping[str, float], q: Optional[Mapping[str, float]] = None) -> "Network":
        """Copy with new active powers (and optionally new fixed q for DirectSetpoint loads)."""
        q = q or {}
        assets = []
        for a in self.assets:
            if a.id in p:
                a = replace(a, p=float(p[a.id]))
            if a.id in q and isinstance(a.control, DirectSetpoint):
                a = replace(a, control=DirectSetpoint(float(q[a.id])))
            assets.append(a)
        return replace(self, assets=tuple(assets))

    def with_asset_limits(self, limits: Mapping[str, Tuple[float, float]]) -> "Network":
        assets = tuple(
            replace(a, q_min=float(limits[a.id][0]), q_max=float(limits[a.id][1])) if a.id in limits else a
            for a in self.assets
        )
        return replace(self, assets=assets)

    def with_setpoints(self, setpoints: Mapping[str, float]) -> "Network":
        """Copy whose setpoint-driven assets hold the given q values."""
        assets = []
        for a in self.assets:
            if a.id in setpoints:
                if isinstance(a.control, FallbackProfile):
                    a = replace(a, control=replace(a.control, q=float(setpoints[a.id])))
                else:
                    a = replace(a, control=DirectSetpoint(float(setpoints[a.id])))
            assets.append(a)
        return replace(self, assets=tuple(assets))

    def with_taps(self, taps: Mapping[str, int]) -> "Network":
        transformers = tuple(
            replace(t, tap=replace(t.tap, position=int(taps[t.id]))) if t.tap is not None and t.id in taps else t
            for t in self.transformers
        )
        return replace(self, transformers=transformers)

    def with_slack(self, bus_id: str, v_set: float) -> "Network":
        buses = tuple(
            replace(b, kind=BusKind.SLACK if b.id == bus_id else BusKind.LOAD,
                    v_set=float(v_set) if b.id == bus_id else b.v_set)
            for b in self.buses
        )
        return replace(self, buses=buses)

    def subnetwork(self, bus_ids: Iterable[str], slack_bus: str, v_set: float,
                   extra_assets: Iterable[Asset] = ()) -> "Network":
        """
        Copy restricted to bus_ids, with slack_bus as the new slack at voltage v_set.

        Branches and assets are kept when all their buses are inside the set.
        """
        keep = set(bus_ids)
        buses = tuple(b for b in self.buses if b.id in keep)
        sub = Network(
            buses=buses,
            lines=tuple(ln for ln in self.lines if ln.from_bus in keep and ln.to_bus in keep),
            transformers=tuple(t for t in self.transformers if t.hv_bus in keep and t.lv_bus in keep),
            assets=tuple(a for a in self.assets if a.bus in keep) + tuple(extra_assets),
            s_base=self.s_base,
        )
        return sub.with_slack(slack_bus, v_set)


def subtree_buses(net: Network, transformer_id: str) -> FrozenSet[str]:
    """Buses on the LV side of a transformer, i.e. the component left after cutting it."""
    t = net.transformer(transformer_id)
    g = net.graph.copy()
    g.remove_edge(t.hv_bus, t.lv_bus)
    component = nx.node_connected_component(g, t.lv_bus)
    if t.hv_bus in component:
        raise InterfaceError(f"Transformer {transformer_id} does not separate the network (meshed)")
    return frozenset(component)


def interface_of(net: Network, transformer_id: str) -> InterfaceSpec:
    """
    Describe the coordination boundary formed by a transformer.

    Args:
        net: Network
        transformer_id: Id of a transformer flagged as interface

    Returns:
        InterfaceSpec: HV-side measurement point, sign convention and the downstream
            controllable assets and tap changers

    Raises:
        InterfaceError: If the id is unknown, not a transformer or not an interface
    """
    if not net.has_transformer(transformer_id):
        if transformer_id in net._lines_by_id:
            raise InterfaceError(f"{transformer_id} is not a transformer")
        raise InterfaceError(f"Unknown transformer id: {transformer_id}")
    t = net.transformer(transformer_id)
    if not t.is_interface:
        raise InterfaceError(f"Transformer {transformer_id} is not marked as interface")
    return _build_interface(net, t)


def _build_interface(net: Network, t: Transformer) -> InterfaceSpec:
    downstream = subtree_buses(net, t.id)
    assets = [a for a in net.assets if a.bus in downstream]
    taps = [t.id] if t.tap is not None else []
    taps += sorted(
        tr.id for tr in net.transformers
        if tr.tap is not None and tr.id != t.id and tr.hv_bus in downstream and tr.lv_bus in downstream
    )
    return InterfaceSpec(
        transformer_id=t.id,
        measurement_bus=t.hv_bus,
        lv_bus=t.lv_bus,
        downstream_buses=downstream,
        controllable_assets=tuple(sorted(a.id for a in assets if a.directly_controllable)),
        voltage_dependent_assets=tuple(sorted(a.id for a in assets if isinstance(a.control, QofV))),
        tap_changers=tuple(taps),
    )


def validate(net: Network) -> ValidationReport:
    """
    Check every network invariant and collect all failures.

    Args:
        net: Network to check

    Returns:
        ValidationReport: errors for invariant violations, warnings for the anti-hunting rule
    """
    errors: List[str] = []
    warnings: List[str] = []

    if net.s_base <= 0:
        errors.append(f"s_base must be positive, got {net.s_base}")

    bus_ids = [b.id for b in net.buses]
    for dup in sorted({i for i in bus_ids if bus_ids.count(i) > 1}):
        errors.append(f"duplicate bus id {dup}")
    slacks = [b.id for b in net.buses if b.kind is BusKind.SLACK]
    if len(slacks) == 0:
        errors.append("network has no slack bus")
    elif len(slacks) > 1:
        errors.append(f"duplicate slack: buses {', '.join(slacks)} are all slack")
    for b in net.buses:
        if b.base_kv <= 0:
            errors.append(f"bus {b.id}: base_kv must be positive")
        if not 0 < b.v_min < b.v_max:
            errors.append(f"bus {b.id}: voltage bounds must satisfy 0 < v_min < v_max")

    known = set(bus_ids)
    for ln in net.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in known:
                errors.append(f"line {ln.id}: unknown bus {end}")
        if ln.from_bus == ln.to_bus:
            errors.append(f"line {ln.id}: from_bus equals to_bus")
        if ln.r == 0 and ln.x == 0:
            errors.append(f"line {ln.id}: r and x are both zero")
        if ln.i_max <= 0:
            errors.append(f"line {ln.id}: i_max must be positive")

    for t in net.transformers:
        missing = [end for end in (t.hv_bus, t.lv_bus) if end not in known]
        for end in missing:
            errors.append(f"transformer {t.id}: unknown bus {end}")
        if t.s_rated <= 0:
            errors.append(f"transformer {t.id}: s_rated must be positive")
        if t.x <= 0:
            errors.append(f"transformer {t.id}: x must be positive")
        if not missing:
            hv, lv = net.bus(t.hv_bus), net.bus(t.lv_bus)
            inline_regulator = hv.level is lv.level and t.tap is not None and hv.base_kv == lv.base_kv
            if hv.level.rank <= lv.level.rank and not inline_regulator:
                errors.append(f"transformer {t.id}: hv_bus level must be above lv_bus level")
        if t.tap is not None:
            tc = t.tap
            if not tc.pos_min <= tc.neutral <= tc.pos_max:
                errors.append(f"transformer {t.id}: tap bounds must satisfy pos_min <= neutral <= pos_max")
            if not tc.pos_min <= tc.position <= tc.pos_max:
                errors.append(f"transformer {t.id}: tap position {tc.position} out of bounds")
            if tc.step_size <= 0:
                errors.append(f"transformer {t.id}: step_size must be positive")
            if tc.delay_steps < 1:
                errors.append(f"transformer {t.id}: delay_steps must be at least 1")
            if tc.deadband <= tc.step_size / 2:
                warnings.append(f"transformer {t.id}: deadband below half step ({tc.deadband} <= {tc.step_size / 2})")

    asset_ids = [a.id for a in net.assets]
    for dup in sorted({i for i in asset_ids if asset_ids.count(i) > 1}):
        errors.append(f"duplicate asset id {dup}")
    for a in net.assets:
        if a.bus not in known:
            errors.append(f"asset {a.id}: unknown bus {a.bus}")
        controllable = a.directly_controllable or isinstance(a.control, (QofV, QofP))
        if controllable and a.kind in DER_KINDS and not a.q_min <= 0 <= a.q_max:
            errors.append(f"asset {a.id}: controllable DER needs q_min <= 0 <= q_max")
        if a.q_min > a.q_max:
            errors.append(f"asset {a.id}: q_min exceeds q_max")
        if math.isfinite(a.s_max) and abs(a.p) > a.s_max:
            errors.append(f"asset {a.id}: |p| exceeds s_max, no admissible q")
        if a.directly_controllable and not admits_setpoint(a.control):
            errors.append(f"asset {a.id}: directly controllable but its control admits no setpoint")
        if isinstance(a.control, (QofV, QofP)):
            problem = check_breakpoints(a.control.points)
            if problem:
                errors.append(f"asset {a.id}: {problem}")
            if not (math.isfinite(a.q_min) and math.isfinite(a.q_max)):
                errors.append(f"asset {a.id}: voltage/power dependent control needs finite q limits")
        if isinstance(a.control, QofP) and not math.isfinite(a.s_max):
            errors.append(f"asset {a.id}: Q(P) control needs a finite s_max")
        if isinstance(a.control, FallbackProfile) and isinstance(a.control.profile, QofV):
            problem = check_breakpoints(a.control.profile.points)
            if problem:
                errors.append(f"asset {a.id}: fallback profile {problem}")

    # topology over the branches whose ends exist, so dangling references do not hide it
    g = nx.Graph()
    g.add_nodes_from(known)
    for ln in net.lines:
        if ln.from_bus in known and ln.to_bus in known:
            g.add_edge(ln.from_bus, ln.to_bus)
    for t in net.transformers:
        if t.hv_bus in known and t.lv_bus in known:
            g.add_edge(t.hv_bus, t.lv_bus)
    if slacks:
        main = nx.node_connected_component(g, slacks[0])
        for b in sorted(known - main):
            errors.append(f"bus {b} is disconnected from the slack bus")
    for t in net.transformers:
        if t.hv_bus not in known or t.lv_bus not in known or t.hv_bus == t.lv_bus:
            continue
        hv, lv = net.bus(t.hv_bus), net.bus(t.lv_bus)
        if hv.level is VoltageLevel.MV and lv.level is VoltageLevel.LV:
            cut = g.copy()
            cut.remove_edge(t.hv_bus, t.lv_bus)
            below = nx.node_connected_component(cut, t.lv_bus)
            if t.hv_bus in below or not nx.is_tree(g.subgraph(below)):
                errors.append(f"transformer {t.id}: LV network below is not radial")

    report = ValidationReport(tuple(errors), tuple(warnings))
    for w in report.warnings:
        logger.warning(w)
    return report
