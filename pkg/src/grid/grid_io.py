import json
import math
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from jsonschema import Draft202012Validator

from src.control.characteristics import (
    ConstantQ,
    ControlCharacteristic,
    DirectSetpoint,
    FallbackProfile,
    FixedCosPhi,
    QofP,
    QofV,
)
from src.grid.network import (
    DEFAULT_S_BASE_MVA,
    DEFAULT_V_MAX,
    DEFAULT_V_MIN,
    Asset,
    AssetKind,
    Bus,
    BusKind,
    GridFileError,
    Line,
    Network,
    NetworkValidationError,
    TapChanger,
    Transformer,
    VoltageLevel,
    validate,
)

logger = logging.getLogger(__name__)

_NUMBER_OR_NULL = {"type": ["number", "null"]}

_CONTROL_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["fixed_cos_phi", "q_of_v", "q_of_p", "direct", "constant", "fallback"]},
        "cos_phi": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "sign": {"enum": ["underexcited", "overexcited"]},
        "points": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        },
        "q": {"type": "number"},
        "profile": {"$ref": "#/$defs/control"},
    },
}

GRID_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$defs": {"control": _CONTROL_SCHEMA},
    "type": "object",
    "required": ["buses"],
    "properties": {
        "s_base_mva": {"type": "number", "exclusiveMinimum": 0},
        "buses": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind", "base_kv", "level"],
                "properties": {
                    "id": {"type": "string"},
                    "kind": {"enum": [k.value for k in BusKind]},
                    "base_kv": {"type": "number"},
                    "v_min": {"type": "number"},
                    "v_max": {"type": "number"},
                    "v_set": {"type": "number"},
                    "level": {"enum": [lv.value for lv in VoltageLevel]},
                },
            },
        },
        "lines": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "from_bus", "to_bus", "r", "x"],
                "properties": {
                    "id": {"type": "string"},
                    "from_bus": {"type": "string"},
                    "to_bus": {"type": "string"},
                    "r": {"type": "number"},
                    "x": {"type": "number"},
                    "b_shunt": {"type": "number"},
                    "i_max": _NUMBER_OR_NULL,
                    "per_unit": {"type": "boolean"},
                },
            },
        },
        "transformers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "hv_bus", "lv_bus", "s_rated", "r", "x"],
                "properties": {
                    "id": {"type": "string"},
                    "hv_bus": {"type": "string"},
                    "lv_bus": {"type": "string"},
                    "s_rated": {"type": "number"},
                    "r": {"type": "number"},
                    "x": {"type": "number"},
                    "is_interface": {"type": "boolean"},
                    "tap": {
                        "type": ["object", "null"],
                        "required": ["pos_min", "pos_max", "neutral", "step_size"],
                        "properties": {
                            "pos_min": {"type": "integer"},
                            "pos_max": {"type": "integer"},
                            "neutral": {"type": "integer"},
                            "step_size": {"type": "number"},
                            "position": {"type": "integer"},
                            "v_setpoint": {"type": "number"},
                            "deadband": {"type": "number"},
                            "delay_steps": {"type": "integer"},
                        },
                    },
                },
            },
        },
        "assets": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "bus", "kind", "p"],
                "properties": {
                    "id": {"type": "string"},
                    "bus": {"type": "string"},
                    "kind": {"enum": [k.value for k in AssetKind]},
                    "p": {"type": "number"},
                    "q": {"type": "number"},
                    "q_min": _NUMBER_OR_NULL,
                    "q_max": _NUMBER_OR_NULL,
                    "s_max": _NUMBER_OR_NULL,
                    "cos_phi": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "control": {"$ref": "#/$defs/control"},
                    "directly_controllable": {"type": "boolean"},
                },
            },
        },
    },
}

_LOAD_KINDS = {AssetKind.HOUSEHOLD.value, AssetKind.COMMERCIAL.value}


def _z_base(base_kv: float, s_base: float) -> float:
    return base_kv ** 2 / s_base


def _i_base_ka(base_kv: float, s_base: float) -> float:
    return s_base / (math.sqrt(3.0) * base_kv)


def _opt(value: Optional[float], default: float) -> float:
    return default if value is None else float(value)


def _schema_problems(data: Any) -> List[str]:
    problems = []
    for error in sorted(Draft202012Validator(GRID_SCHEMA).iter_errors(data), key=lambda e: list(e.path)):
        where = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.path).lstrip(".")
        problems.append(f"{where or '<root>'}: {error.message}")
    return problems


def _control_from_dict(data: Dict[str, Any], s_base: float) -> ControlCharacteristic:
    kind = data["type"]
    if kind == "fixed_cos_phi":
        return FixedCosPhi(float(data.get("cos_phi", 1.0)), data.get("sign", "underexcited") == "underexcited")
    if kind == "q_of_v":
        return QofV(tuple((float(v), float(q)) for v, q in data["points"])) if "points" in data else QofV()
    if kind == "q_of_p":
        return QofP(tuple((float(p), float(q)) for p, q in data["points"])) if "points" in data else QofP()
    if kind == "direct":
        return DirectSetpoint(float(data.get("q", 0.0)) / s_base)
    if kind == "constant":
        return ConstantQ(float(data.get("q", 0.0)) / s_base)
    profile = data.get("profile")
    return FallbackProfile(
        q=float(data.get("q", 0.0)) / s_base,
        profile=_control_from_dict(profile, s_base) if profile else None,
    )


def _control_to_dict(c: ControlCharacteristic, s_base: float) -> Dict[str, Any]:
    if isinstance(c, FixedCosPhi):
        return {"type": "fixed_cos_phi", "cos_phi": c.cos_phi,
                "sign": "underexcited" if c.underexcited else "overexcited"}
    if isinstance(c, QofV):
        return {"type": "q_of_v", "points": [list(pt) for pt in c.points]}
    if isinstance(c, QofP):
        return {"type": "q_of_p", "points": [list(pt) for pt in c.points]}
    if isinstance(c, DirectSetpoint):
        return {"type": "direct", "q": c.q * s_base}
    if isinstance(c, ConstantQ):
        return {"type": "constant", "q": c.q * s_base}
    data: Dict[str, Any] = {"type": "fallback", "q": c.q * s_base}
    if c.profile is not None:
        data["profile"] = _control_to_dict(c.profile, s_base)
    return data


def network_from_dict(data: Dict[str, Any]) -> Network:
    """
    Build a per-unit Network from a grid document in engineering units.

    Args:
        data: Parsed grid document

    Returns:
        Network: Network in per-unit on s_base (not yet validated)

    Raises:
        GridFileError: If the document violates the grid schema
    """
    problems = _schema_problems(data)
    if problems:
        raise GridFileError("Grid file does not match the schema", problems)

    s_base = float(data.get("s_base_mva", DEFAULT_S_BASE_MVA))
    buses = tuple(
        Bus(
            id=b["id"],
            kind=BusKind(b["kind"]),
            base_kv=float(b["base_kv"]),
            v_min=_opt(b.get("v_min"), DEFAULT_V_MIN),
            v_max=_opt(b.get("v_max"), DEFAULT_V_MAX),
            level=VoltageLevel(b["level"]),
            v_set=_opt(b.get("v_set"), 1.0),
        )
        for b in data["buses"]
    )
    kv = {b.id: b.base_kv for b in buses}

    lines = []
    for ln in data.get("lines", []):
        i_max = ln.get("i_max")
        if ln.get("per_unit", False):
            r, x, b_sh = float(ln["r"]), float(ln["x"]), float(ln.get("b_shunt", 0.0))
            i_pu = math.inf if i_max is None else float(i_max)
        else:
            base_kv = kv.get(ln["from_bus"]) or kv.get(ln["to_bus"])
            if base_kv is None:
                raise GridFileError("Grid file references unknown buses", [f"line {ln['id']}: unknown buses"])
            z_base = _z_base(base_kv, s_base)
            r, x = float(ln["r"]) / z_base, float(ln["x"]) / z_base
            # b_shunt in microsiemens
            b_sh = float(ln.get("b_shunt", 0.0)) * 1e-6 * z_base
            i_pu = math.inf if i_max is None else float(i_max) / _i_base_ka(base_kv, s_base)
        lines.append(Line(ln["id"], ln["from_bus"], ln["to_bus"], r, x, b_sh, i_pu))

    transformers = []
    for t in data.get("transformers", []):
        tap = None
        if t.get("tap"):
            tp = t["tap"]
            tap = TapChanger(
                pos_min=int(tp["pos_min"]),
                pos_max=int(tp["pos_max"]),
                neutral=int(tp["neutral"]),
                step_size=float(tp["step_size"]),
                position=int(tp.get("position", tp["neutral"])),
                v_setpoint=float(tp.get("v_setpoint", 1.0)),
                deadband=float(tp.get("deadband", 0.015)),
                delay_steps=int(tp.get("delay_steps", 1)),
            )
        transformers.append(Transformer(
            id=t["id"], hv_bus=t["hv_bus"], lv_bus=t["lv_bus"], s_rated=float(t["s_rated"]),
            r=float(t["r"]), x=float(t["x"]), tap=tap, is_interface=bool(t.get("is_interface", False)),
        ))

    assets = []
    for a in data.get("assets", []):
        s_max = a.get("s_max")
        s_max_pu = math.inf if s_max is None else float(s_max) / s_base
        q_min = a.get("q_min")
        q_max = a.get("q_max")
        default_q = s_max_pu if math.isfinite(s_max_pu) else math.inf
        if "control" in a:
            control = _control_from_dict(a["control"], s_base)
        elif "q" in a:
            control = DirectSetpoint(float(a["q"]) / s_base)
        elif a["kind"] in _LOAD_KINDS:
            control = FixedCosPhi(float(a.get("cos_phi", 0.95)), True)
        else:
            control = FixedCosPhi(1.0, True)
        assets.append(Asset(
            id=a["id"],
            bus=a["bus"],
            kind=AssetKind(a["kind"]),
            p=float(a["p"]) / s_base,
            q_min=-default_q if q_min is None else float(q_min) / s_base,
            q_max=default_q if q_max is None else float(q_max) / s_base,
            s_max=s_max_pu,
            control=control,
            directly_controllable=bool(a.get("directly_controllable", False)),
        ))

    return Network(tuple(buses), tuple(lines), tuple(transformers), tuple(assets), s_base)


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def network_to_dict(net: Network) -> Dict[str, Any]:
    """Convert a per-unit Network to a grid document in engineering units."""
    s_base = net.s_base
    kv = {b.id: b.base_kv for b in net.buses}
    lines = []
    for ln in net.lines:
        base_kv = kv[ln.from_bus]
        z_base = _z_base(base_kv, s_base)
        i_max = None if not math.isfinite(ln.i_max) else ln.i_max * _i_base_ka(base_kv, s_base)
        lines.append({
            "id": ln.id, "from_bus": ln.from_bus, "to_bus": ln.to_bus,
            "r": ln.r * z_base, "x": ln.x * z_base, "b_shunt": ln.b_shunt / z_base * 1e6, "i_max": i_max,
        })
    transformers = []
    for t in net.transformers:
        tap = None
        if t.tap is not None:
            tc = t.tap
            tap = {"pos_min": tc.pos_min, "pos_max": tc.pos_max, "neutral": tc.neutral,
                   "step_size": tc.step_size, "position": tc.position, "v_setpoint": tc.v_setpoint,
                   "deadband": tc.deadband, "delay_steps": tc.delay_steps}
        transformers.append({"id": t.id, "hv_bus": t.hv_bus, "lv_bus": t.lv_bus, "s_rated": t.s_rated,
                             "r": t.r, "x": t.x, "is_interface": t.is_interface, "tap": tap})
    assets = []
    for a in net.assets:
        scale = lambda v: None if not math.isfinite(v) else v * s_base  # noqa: E731
        assets.append({
            "id": a.id, "bus": a.bus, "kind": a.kind.value, "p": a.p * s_base,
            "q_min": scale(a.q_min), "q_max": scale(a.q_max), "s_max": scale(a.s_max),
            "control": _control_to_dict(a.control, s_base),
            "directly_controllable": a.directly_controllable,
        })
    return {
        "s_base_mva": s_base,
        "buses": [{"id": b.id, "kind": b.kind.value, "base_kv": b.base_kv, "v_min": b.v_min,
                   "v_max": b.v_max, "v_set": b.v_set, "level": b.level.value} for b in net.buses],
        "lines": lines,
        "transformers": transformers,
        "assets": assets,
    }


def read_network(path: Union[str, Path]) -> Network:
    """Parse a grid file without validating the network invariants."""
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise GridFileError(f"Grid file {path} is not valid JSON", [str(e)])
    return network_from_dict(data)


def load_network(path: Union[str, Path]) -> Network:
    """
    Load and validate a grid file.

    Args:
        path: Path to a JSON grid file in engineering units

    Returns:
        Network: Validated network in per-unit on s_base

    Raises:
        GridFileError: On parse or schema errors (field-level messages)
        NetworkValidationError: On invariant violations (all failures listed)
    """
    try:
        net = read_network(path)
        report = validate(net)
        if not report.ok:
            raise NetworkValidationError(report)
        logger.info(f"Loaded network {path}: {len(net.buses)} buses, {len(net.lines)} lines, "
                    f"{len(net.transformers)} transformers, {len(net.assets)} assets")
        return net
    except Exception as e:
        logger.error(f"Failed to load network {path}: {e}")
        raise


def save_network(net: Network, path: Union[str, Path]) -> Path:
    """Write a network as a grid file in engineering units."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(network_to_dict(net), f, indent=2)
    logger.info(f"Saved network to {path}")
    return path
