"""
Synthetic fixture feeder: a 115/20 kV, 40 MVA HV/MV station feeding 15 MV/LV substations with
PV, wind, storage, a charging park, commercial loads and 160 households, plus a one-day scenario.

Electrical parameters are synthetic: 150 mm² Al MV cable, 630 kVA MV/LV transformers and
150 mm² Al LV cable, values typical for German rural/suburban feeders.
"""
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from src.grid.grid_io import network_from_dict, save_network
from src.grid.network import Network

logger = logging.getLogger(__name__)

FEEDER_S_BASE_MVA = 10.0
SUBSTATIONS = 15
VRDT_SUBSTATIONS = (5, 10, 15)
# households per substation: 11 at substations 1-10, 10 at 11-15
HOUSEHOLDS = {k: 11 if k <= 10 else 10 for k in range(1, SUBSTATIONS + 1)}
FEEDER_A = range(1, 9)
FEEDER_B = range(9, 16)

MV_CABLE = {"r_per_km": 0.206, "x_per_km": 0.122, "b_per_km": 0.0, "i_max": 0.319}
LV_CABLE = {"r_per_km": 0.208, "x_per_km": 0.080, "i_max": 0.270}
MV_SEGMENT_KM = 1.2
LV_SEGMENT_KM = 0.2

HOUSEHOLD_PEAK_MW = 0.003
ROOFTOP_PV_MW = 0.045
DAY_STEPS = 96


def _mv_bus(k: int) -> str:
    return f"MV{k}"


def _lv_bus(k: int, j: int) -> str:
    return f"LV{k}_{j}"


def fixture_feeder_dict() -> Dict[str, Any]:
    """Grid document of the fixture feeder in engineering units."""
    buses: List[Dict[str, Any]] = [
        {"id": "HV", "kind": "slack", "base_kv": 115.0, "level": "HV", "v_set": 1.0},
        {"id": "MV0", "kind": "load", "base_kv": 20.0, "level": "MV"},
    ]
    lines: List[Dict[str, Any]] = []
    transformers: List[Dict[str, Any]] = [{
        "id": "T_HVMV", "hv_bus": "HV", "lv_bus": "MV0", "s_rated": 40.0, "r": 0.004, "x": 0.12,
        "is_interface": True,
        "tap": {"pos_min": -9, "pos_max": 9, "neutral": 0, "step_size": 0.015, "position": 0,
                "v_setpoint": 1.02, "deadband": 0.015, "delay_steps": 1},
    }]
    assets: List[Dict[str, Any]] = []

    for feeder in (FEEDER_A, FEEDER_B):
        previous = "MV0"
        for k in feeder:
            buses.append({"id": _mv_bus(k), "kind": "load", "base_kv": 20.0, "level": "MV"})
            lines.append({
                "id": f"L_MV{k}", "from_bus": previous, "to_bus": _mv_bus(k),
                "r": MV_CABLE["r_per_km"] * MV_SEGMENT_KM, "x": MV_CABLE["x_per_km"] * MV_SEGMENT_KM,
                "i_max": MV_CABLE["i_max"],
            })
            previous = _mv_bus(k)

    for k in range(1, SUBSTATIONS + 1):
        for j in (0, 1):
            buses.append({"id": _lv_bus(k, j), "kind": "load", "base_kv": 0.4, "level": "LV"})
        trafo: Dict[str, Any] = {"id": f"T{k}", "hv_bus": _mv_bus(k), "lv_bus": _lv_bus(k, 0), "s_rated": 0.63,
                                 "r": 0.01, "x": 0.04, "is_interface": True, "tap": None}
        if k in VRDT_SUBSTATIONS:
            trafo["tap"] = {"pos_min": -4, "pos_max": 4, "neutral": 0, "step_size": 0.025, "position": 0,
                            "v_setpoint": 1.0, "deadband": 0.02, "delay_steps": 1}
        transformers.append(trafo)
        lines.append({
            "id": f"L_LV{k}", "from_bus": _lv_bus(k, 0), "to_bus": _lv_bus(k, 1),
            "r": LV_CABLE["r_per_km"] * LV_SEGMENT_KM, "x": LV_CABLE["x_per_km"] * LV_SEGMENT_KM,
            "i_max": LV_CABLE["i_max"],
        })
        for h in range(HOUSEHOLDS[k]):
            assets.append({"id": f"hh{k}_{h}", "bus": _lv_bus(k, h % 2), "kind": "household",
                           "p": -HOUSEHOLD_PEAK_MW * 0.5, "cos_phi": 0.97})
        assets.append({"id": f"pv_roof{k}", "bus": _lv_bus(k, 1), "kind": "pv", "p": 0.0,
                       "s_max": ROOFTOP_PV_MW * 1.1, "control": {"type": "q_of_v"}})
        if k in VRDT_SUBSTATIONS:
            assets.append({"id": f"bat_lv{k}", "bus": _lv_bus(k, 1), "kind": "storage", "p": 0.0, "s_max": 0.05,
                           "control": {"type": "fallback", "q": 0.0, "profile": {"type": "q_of_v"}},
                           "directly_controllable": True})

    assets += [
        {"id": "wind_mv8", "bus": "MV8", "kind": "wind", "p": 1.0, "s_max": 2.2,
         "control": {"type": "fallback", "q": 0.0, "profile": {"type": "q_of_v"}}, "directly_controllable": True},
        {"id": "pv_park14", "bus": "MV14", "kind": "pv", "p": 0.0, "s_max": 1.65,
         "control": {"type": "fallback", "q": 0.0, "profile": {"type": "q_of_v"}}, "directly_controllable": True},
        {"id": "storage_mv4", "bus": "MV4", "kind": "storage", "p": 0.0, "s_max": 1.0,
         "control": {"type": "fallback", "q": 0.0}, "directly_controllable": True},
        {"id": "ev_park11", "bus": "MV11", "kind": "ev_charging", "p": -0.2, "s_max": 0.7,
         "control": {"type": "fallback", "q": 0.0, "profile": {"type": "constant", "q": 0.0}},
         "directly_controllable": True},
    ]
    for k in (3, 7, 12):
        assets.append({"id": f"com{k}", "bus": _mv_bus(k), "kind": "commercial", "p": -0.3, "cos_phi": 0.95})

    return {"s_base_mva": FEEDER_S_BASE_MVA, "buses": buses, "lines": lines, "transformers": transformers,
            "assets": assets}


def build_fixture_feeder() -> Network:
    return network_from_dict(fixture_feeder_dict())


def write_fixture_feeder(path: Union[str, Path]) -> Path:
    """Write the fixture feeder grid file."""
    path = save_network(build_fixture_feeder(), path)
    logger.info(f"Fixture feeder written to {path}")
    return path


def _day_shapes(steps: int, seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    hours = np.arange(steps) * 24.0 / steps
    pv = np.clip(np.sin(math.pi * (hours - 6.0) / 12.0), 0.0, None)
    household = 0.35 + 0.25 * np.exp(-((hours - 7.5) / 1.5) ** 2) + 0.6 * np.exp(-((hours - 19.0) / 2.0) ** 2)
    commercial = 0.3 + 0.6 * ((hours >= 8.0) & (hours < 18.0))
    ev = 0.1 + 0.8 * np.exp(-((hours - 18.5) / 2.0) ** 2)
    wind = np.clip(0.45 + 0.2 * np.sin(2 * math.pi * hours / 24.0) + 0.05 * rng.standard_normal(steps), 0.05, 0.95)
    return {"pv": pv, "household": household, "commercial": commercial, "ev": ev, "wind": wind}


def feeder_day_profiles(net: Network, steps: int = DAY_STEPS, seed: int = 7) -> pd.DataFrame:
    """
    High-PV one-day profiles for every time-varying asset, in the profile CSV layout.

    Returns:
        pd.DataFrame: columns step, asset_id, p_mw (generation positive)
    """
    shapes = _day_shapes(steps, seed)
    scale = {
        "household": lambda a: -HOUSEHOLD_PEAK_MW * shapes["household"],
        "commercial": lambda a: -0.5 * shapes["commercial"],
        "ev_charging": lambda a: -0.6 * shapes["ev"],
        "wind": lambda a: 2.0 * shapes["wind"],
    }
    rows = []
    for a in net.assets:
        kind = a.kind.value
        if kind == "pv":
            series = (1.5 if a.directly_controllable else ROOFTOP_PV_MW) * shapes["pv"]
        elif kind in scale:
            series = scale[kind](a)
        else:
            continue
        rows.append(pd.DataFrame({"step": np.arange(steps), "asset_id": a.id, "p_mw": np.round(series, 6)}))
    return pd.concat(rows, ignore_index=True).sort_values(["step", "asset_id"], kind="stable")


def feeder_day_scenario(grid_file: str, profile_file: str, partition: bool = False,
                        steps: int = DAY_STEPS) -> Dict[str, Any]:
    """
    Scenario document: TSO request step change at 09:00/10:00, optionally a partition of all edges
    from noon to 16:00. Event times scale with the number of steps per day.
    """
    events: List[Dict[str, Any]] = [
        {"at": steps * 3 // 8, "kind": "tso_q_request", "value": 0.5},
        {"at": steps * 5 // 12, "kind": "tso_q_request", "value": -1.5},
    ]
    if partition:
        events.append({"at": steps // 2, "kind": "comm_partition", "sets": [["central"], ["edge:*"]],
                       "duration": max(steps // 6, 1)})
    return {
        "name": "feeder15-day-partition" if partition else "feeder15-day",
        "grid": grid_file,
        "profiles": profile_file,
        "step_minutes": 1440 / steps,
        "horizon": steps,
        "seed": 7,
        "constraints": {"v_min": 0.9, "v_max": 1.1},
        "events": events,
    }


def write_feeder_day(out_dir: Union[str, Path], partition: bool = False, steps: int = DAY_STEPS
                     ) -> Tuple[Path, Path, Path]:
    """
    Write grid, profiles and scenario of the fixture day into out_dir.

    Returns:
        Tuple[Path, Path, Path]: Grid file, profile CSV and scenario file
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = write_fixture_feeder(out / "feeder15.json")
    net = build_fixture_feeder()
    profiles = out / "feeder15_day_profiles.csv"
    feeder_day_profiles(net, steps).to_csv(profiles, index=False)
    scenario = out / ("feeder15_day_partition.json" if partition else "feeder15_day.json")
    with open(scenario, "w") as f:
        json.dump(feeder_day_scenario(grid.name, profiles.name, partition, steps), f, indent=2)
    logger.info(f"Fixture day written to {out}")
    return grid, profiles, scenario
