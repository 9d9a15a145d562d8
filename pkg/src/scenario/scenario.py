"""
Scenario files: grid reference, profiles, events and run settings of one time-series experiment.
"""
import json
import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from fnmatch import fnmatch
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd
from jsonschema import Draft202012Validator

from src.grid.grid_io import load_network
from src.grid.network import Network, VoltageLevel

logger = logging.getLogger(__name__)

DEFAULT_STEP_MINUTES = 15
TAP_MODES = ("auto", "optimiser", "fixed")
PROFILE_COLUMNS = ["step", "asset_id", "p_mw"]
PU_COLUMNS = ["step", "asset_id", "p"]


class ScenarioError(ValueError):
    """Raised when a scenario or its profiles are inconsistent."""

    def __init__(self, message: str, problems: Optional[List[str]] = None):
        self.problems = problems or []
        detail = "; ".join(self.problems)
        super().__init__(f"{message}: {detail}" if detail else message)


class EventKind(str, Enum):
    TSO_Q_REQUEST = "tso_q_request"
    COMM_PARTITION = "comm_partition"
    ASSET_LIMIT_CHANGE = "asset_limit_change"
    TAP_MODE_CHANGE = "tap_mode_change"


_EVENT_SCHEMA = {
    "type": "object",
    "required": ["at", "kind"],
    "properties": {
        "at": {"type": "integer", "minimum": 0},
        "kind": {"enum": [k.value for k in EventKind]},
        "value": {"type": "number"},
        "sets": {"type": "array", "items": {"type": "array", "items": {"type": "string"}}, "minItems": 2,
                 "maxItems": 2},
        "duration": {"type": "integer", "minimum": 0},
        "asset": {"type": "string"},
        "q_min": {"type": "number"},
        "q_max": {"type": "number"},
        "transformer": {"type": "string"},
        "mode": {"enum": list(TAP_MODES)},
    },
    "allOf": [
        {"if": {"properties": {"kind": {"const": "tso_q_request"}}}, "then": {"required": ["value"]}},
        {"if": {"properties": {"kind": {"const": "comm_partition"}}}, "then": {"required": ["sets", "duration"]}},
        {"if": {"properties": {"kind": {"const": "asset_limit_change"}}},
         "then": {"required": ["asset", "q_min", "q_max"]}},
        {"if": {"properties": {"kind": {"const": "tap_mode_change"}}}, "then": {"required": ["transformer", "mode"]}},
    ],
}

SCENARIO_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["grid", "horizon"],
    "properties": {
        "name": {"type": "string"},
        "grid": {"type": "string"},
        "profiles": {"type": ["string", "null"]},
        "step_minutes": {"type": "number", "exclusiveMinimum": 0},
        "horizon": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "interface": {"type": "string"},
        "constraints": {
            "type": "object",
            "properties": {
                "v_min": {"type": "number"},
                "v_max": {"type": "number"},
                "bus_overrides": {
                    "type": "object",
                    "additionalProperties": {"type": "array", "items": {"type": "number"}, "minItems": 2,
                                             "maxItems": 2},
                },
            },
        },
        "tap_modes": {"type": "object", "additionalProperties": {"enum": list(TAP_MODES)}},
        "comms": {
            "type": "object",
            "properties": {
                "latency_steps": {"type": "integer", "minimum": 0},
                "drop_probability": {"type": "number", "minimum": 0, "maximum": 1},
                "links": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["from", "to"],
                        "properties": {
                            "from": {"type": "string"},
                            "to": {"type": "string"},
                            "latency_steps": {"type": "integer", "minimum": 0},
                            "drop_probability": {"type": "number", "minimum": 0, "maximum": 1},
                        },
                    },
                },
            },
        },
        "coordination": {"type": "object"},
        "simulation": {"type": "object"},
        "events": {"type": "array", "items": _EVENT_SCHEMA},
    },
}


@dataclass(frozen=True)
class Event:
    at: int
    kind: EventKind
    data: Dict[str, Any] = field(default_factory=dict)

    def partition_sets(self, nodes: Sequence[str]) -> Tuple[List[str], List[str]]:
        """Expand the node patterns of a comm_partition event against the known node ids."""
        expanded = []
        for patterns in self.data["sets"]:
            expanded.append(sorted({n for n in nodes for pat in patterns if fnmatch(n, pat)}))
        return expanded[0], expanded[1]


@dataclass(frozen=True, eq=False)
class Scenario:
    """
    One reproducible experiment.

    Profiles are kept in per-unit, generation-positive, indexed by (step, asset_id).
    """

    network: Network
    horizon: int
    name: str = "scenario"
    grid_path: Optional[Path] = None
    step_minutes: float = DEFAULT_STEP_MINUTES
    profiles: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=PU_COLUMNS))
    events: Tuple[Event, ...] = ()
    seed: int = 0
    interface_id: Optional[str] = None
    constraints: Dict[str, Any] = field(default_factory=dict)
    tap_modes: Dict[str, str] = field(default_factory=dict)
    comms: Dict[str, Any] = field(default_factory=dict)
    settings: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        problems = check_scenario(self)
        if problems:
            raise ScenarioError(f"Scenario {self.name} is inconsistent", problems)

    def p_at(self, step: int) -> Dict[str, float]:
        rows = self._by_step.get(step)
        return {} if rows is None else dict(zip(rows["asset_id"], rows["p"]))

    def q_at(self, step: int) -> Dict[str, float]:
        rows = self._by_step.get(step)
        if rows is None or "q" not in rows:
            return {}
        return {a: q for a, q in zip(rows["asset_id"], rows["q"]) if not math.isnan(q)}

    @property
    def _by_step(self) -> Dict[int, pd.DataFrame]:
        cache = self.__dict__.get("_step_cache")
        if cache is None:
            cache = {int(step): rows for step, rows in self.profiles.groupby("step")}
            object.__setattr__(self, "_step_cache", cache)
        return cache

    def events_at(self, step: int) -> List[Event]:
        return [e for e in self.events if e.at == step]

    def tap_mode(self, transformer_id: str) -> str:
        """Configured tap mode; the HV/MV changer defaults to its automaton, the others to the optimiser."""
        if transformer_id in self.tap_modes:
            return self.tap_modes[transformer_id]
        t = self.network.transformer(transformer_id)
        return "auto" if self.network.bus(t.hv_bus).level is VoltageLevel.HV else "optimiser"

    def resolve_interface(self) -> str:
        """Configured interface, else the interface transformer below the slack bus."""
        if self.interface_id is not None:
            return self.interface_id
        slack = self.network.slack_bus.id
        for t in self.network.transformers:
            if t.is_interface and t.hv_bus == slack:
                return t.id
        candidates = [t.id for t in self.network.transformers if t.is_interface]
        if not candidates:
            raise ScenarioError(f"Scenario {self.name}: grid has no interface transformer")
        return candidates[0]


def check_scenario(sc: Scenario) -> List[str]:
    problems = []
    net = sc.network
    if sc.horizon < 0:
        problems.append(f"horizon must be >= 0, got {sc.horizon}")
    for e in sc.events:
        if not 0 <= e.at < sc.horizon:
            problems.append(f"event {e.kind.value} at step {e.at} outside horizon {sc.horizon}")
        if e.kind is EventKind.ASSET_LIMIT_CHANGE and not net.has_asset(e.data["asset"]):
            problems.append(f"event at step {e.at}: unknown asset {e.data['asset']}")
        if e.kind is EventKind.TAP_MODE_CHANGE and e.data["transformer"] not in net.tap_changers:
            problems.append(f"event at step {e.at}: {e.data['transformer']} has no tap changer")
    for tid in sc.tap_modes:
        if tid not in net.tap_changers:
            problems.append(f"tap mode for {tid}, which has no tap changer")
    if sc.interface_id is not None and not net.has_transformer(sc.interface_id):
        problems.append(f"unknown interface transformer {sc.interface_id}")

    prof = sc.profiles
    if len(prof):
        unknown = sorted(set(prof["asset_id"]) - {a.id for a in net.assets})
        if unknown:
            problems.append(f"profiles reference unknown assets: {', '.join(unknown)}")
        steps = set(range(sc.horizon))
        for asset_id, rows in prof.groupby("asset_id"):
            missing = steps - set(int(s) for s in rows["step"])
            if missing:
                problems.append(f"profile of {asset_id} misses {len(missing)} steps, first {min(missing)}")
            if rows["step"].duplicated().any():
                problems.append(f"profile of {asset_id} has duplicate steps")
    return problems


def read_profiles(path: Union[str, Path], s_base: float) -> pd.DataFrame:
    """
    Read a profile CSV `step,asset_id,p_mw[,q_mvar]` into per-unit columns step, asset_id, p[, q].

    Values are injections: generation positive, consumption negative.
    """
    try:
        df = pd.read_csv(path)
    except Exception as e:
        raise ScenarioError(f"Cannot read profiles {path}", [str(e)])
    missing = [c for c in PROFILE_COLUMNS if c not in df.columns]
    if missing:
        raise ScenarioError(f"Profile file {path} lacks columns", missing)
    out = pd.DataFrame({
        "step": df["step"].astype(int),
        "asset_id": df["asset_id"].astype(str),
        "p": df["p_mw"].astype(float) / s_base,
    })
    if "q_mvar" in df.columns:
        out["q"] = df["q_mvar"].astype(float) / s_base
    return out.sort_values(["step", "asset_id"], kind="stable").reset_index(drop=True)


def scenario_from_dict(data: Mapping[str, Any], base_dir: Union[str, Path] = ".",
                       network: Optional[Network] = None) -> Scenario:
    """
    Build a Scenario from a parsed scenario document.

    Args:
        data: Scenario document
        base_dir: Directory that relative grid and profile paths are resolved against
        network: Pre-loaded grid; loaded from the grid path when omitted

    Returns:
        Scenario: Checked scenario with profiles in per-unit

    Raises:
        ScenarioError: On schema errors or inconsistencies
    """
    errors = sorted(Draft202012Validator(SCENARIO_SCHEMA).iter_errors(data), key=lambda e: list(e.path))
    if errors:
        problems = [f"{'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise ScenarioError("Scenario does not match the schema", problems)

    base_dir = Path(base_dir)
    grid_path = base_dir / data["grid"]
    network = network or load_network(grid_path)
    profiles = pd.DataFrame(columns=PU_COLUMNS)
    if data.get("profiles"):
        profiles = read_profiles(base_dir / data["profiles"], network.s_base)

    events = []
    for e in data.get("events", []):
        payload = {k: v for k, v in e.items() if k not in ("at", "kind")}
        events.append(Event(int(e["at"]), EventKind(e["kind"]), payload))
    events.sort(key=lambda e: e.at)

    return Scenario(
        network=network,
        horizon=int(data["horizon"]),
        name=data.get("name", Path(data["grid"]).stem),
        grid_path=grid_path,
        step_minutes=float(data.get("step_minutes", DEFAULT_STEP_MINUTES)),
        profiles=profiles,
        events=tuple(events),
        seed=int(data.get("seed", 0)),
        interface_id=data.get("interface"),
        constraints=dict(data.get("constraints", {})),
        tap_modes=dict(data.get("tap_modes", {})),
        comms=dict(data.get("comms", {})),
        settings={k: dict(data[k]) for k in ("coordination", "simulation") if k in data},
    )


def load_scenario(path: Union[str, Path]) -> Scenario:
    """
    Load a scenario file and the grid and profiles it references.

    Raises:
        ScenarioError: On schema errors or inconsistencies
        GridFileError: If the referenced grid cannot be parsed
        NetworkValidationError: If the referenced grid is invalid
    """
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
        scenario = scenario_from_dict(data, path.parent)
        logger.info(f"Loaded scenario {scenario.name}: {scenario.horizon} steps, {len(scenario.events)} events")
        return scenario
    except json.JSONDecodeError as e:
        logger.error(f"Scenario file {path} is not valid JSON: {e}")
        raise ScenarioError(f"Scenario file {path} is not valid JSON", [str(e)])
    except Exception as e:
        logger.error(f"Failed to load scenario {path}: {e}")
        raise
