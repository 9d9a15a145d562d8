"""
Result log of a scenario run and its file formats.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from src.comms.bus import LOG_COLUMNS

logger = logging.getLogger(__name__)

TIMESERIES_COLUMNS = ["step", "group", "key", "value"]
EVENT_COLUMNS = ["step", "node", "kind", "detail"]
RESULT_FORMATS = ("csv", "jsonl")


@dataclass
class StepRecord:
    """
    Everything recorded for one step. Quantities are per-unit; None marks a quantity that
    does not exist in this step (no target, no assessment).
    """

    step: int
    voltages: Dict[str, float] = field(default_factory=dict)
    q_if: Optional[float] = None
    p_if: Optional[float] = None
    flex_min: Optional[float] = None
    flex_max: Optional[float] = None
    target: Optional[float] = None
    deviation: float = 0.0
    taps: Dict[str, int] = field(default_factory=dict)
    modes: Dict[str, str] = field(default_factory=dict)
    violations: List[Dict[str, Any]] = field(default_factory=list)
    converged: bool = True
    error: Optional[str] = None
    oltc_iterations: int = 0

    @property
    def achieved(self) -> Optional[float]:
        return self.q_if

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StepRecord":
        return cls(**data)

    def groups(self) -> List[Dict[str, Any]]:
        """Long-format rows: one per recorded quantity."""
        rows = [{"step": self.step, "group": "voltage", "key": b, "value": v} for b, v in self.voltages.items()]
        for key in ("q_if", "p_if", "flex_min", "flex_max", "target", "deviation"):
            value = getattr(self, key)
            if value is not None:
                rows.append({"step": self.step, "group": "interface", "key": key, "value": value})
        rows += [{"step": self.step, "group": "tap", "key": t, "value": p} for t, p in self.taps.items()]
        rows += [{"step": self.step, "group": "mode", "key": n, "value": m} for n, m in self.modes.items()]
        rows += [{"step": self.step, "group": "violation", "key": v["element"], "value": v["magnitude"]}
                 for v in self.violations]
        rows.append({"step": self.step, "group": "status", "key": "converged", "value": int(self.converged)})
        return rows


@dataclass(eq=False)
class ResultLog:
    name: str = "scenario"
    seed: int = 0
    step_minutes: float = 15.0
    records: List[StepRecord] = field(default_factory=list)
    events: List[Dict[str, Any]] = field(default_factory=list)
    comms: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=LOG_COLUMNS))

    @property
    def violation_count(self) -> int:
        return sum(len(r.violations) for r in self.records)

    def timeseries_frame(self) -> pd.DataFrame:
        rows = [row for r in self.records for row in r.groups()]
        return pd.DataFrame(rows, columns=TIMESERIES_COLUMNS)

    def events_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.events, columns=EVENT_COLUMNS)

    def summary(self) -> Dict[str, Any]:
        """Aggregates of the run; contains nothing that varies between identical runs."""
        deviations = [abs(r.deviation) for r in self.records if r.target is not None]
        widths = [r.flex_max - r.flex_min for r in self.records
                  if r.flex_min is not None and r.flex_max is not None]
        voltages = [v for r in self.records for v in r.voltages.values()]
        dropped = int((self.comms["t_delivered"] == "DROPPED").sum()) if len(self.comms) else 0
        fallback_steps = sum(1 for r in self.records if any(m == "fallback" for m in r.modes.values()))
        return {
            "name": self.name,
            "seed": self.seed,
            "steps": len(self.records),
            "step_minutes": self.step_minutes,
            "violation_count": self.violation_count,
            "failed_steps": sum(1 for r in self.records if not r.converged),
            "max_deviation": max(deviations, default=0.0),
            "mean_deviation": float(np.mean(deviations)) if deviations else 0.0,
            "steps_with_target": len(deviations),
            "flex_range": {
                "assessments": len(widths),
                "min_width": min(widths, default=0.0),
                "mean_width": float(np.mean(widths)) if widths else 0.0,
                "max_width": max(widths, default=0.0),
            },
            "v_min": min(voltages, default=None),
            "v_max": max(voltages, default=None),
            "tap_moves": self.tap_moves(),
            "fallback_steps": fallback_steps,
            "messages": {"sent": len(self.comms), "dropped": dropped},
            "events": len(self.events),
        }

    def tap_moves(self) -> int:
        moves = 0
        for prev, cur in zip(self.records, self.records[1:]):
            moves += sum(abs(cur.taps.get(t, p) - p) for t, p in prev.taps.items())
        return moves


def emit_results(log: ResultLog, fmt: str, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Write a result log to a directory.

    Args:
        log: Result log
        fmt: "csv" for a long-format timeseries.csv, "jsonl" for one record per line in timeseries.jsonl
        out_dir: Output directory, created if missing

    Returns:
        Dict[str, Path]: Written files by role

    Raises:
        ValueError: On an unknown format
        OSError: On I/O errors
    """
    if fmt not in RESULT_FORMATS:
        raise ValueError(f"Unknown result format '{fmt}', expected one of {RESULT_FORMATS}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        if fmt == "csv":
            paths["timeseries"] = out / "timeseries.csv"
            log.timeseries_frame().to_csv(paths["timeseries"], index=False)
        else:
            paths["timeseries"] = out / "timeseries.jsonl"
            with open(paths["timeseries"], "w") as f:
                for r in log.records:
                    f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        paths["events"] = out / "events.csv"
        log.events_frame().to_csv(paths["events"], index=False)
        paths["comms"] = out / "comms.csv"
        log.comms.to_csv(paths["comms"], index=False)
        paths["summary"] = out / "summary.json"
        with open(paths["summary"], "w") as f:
            json.dump(log.summary(), f, sort_keys=True, indent=2)
            f.write("\n")
    except OSError as e:
        logger.error(f"Failed to write results to {out}: {e}")
        raise
    logger.info(f"Wrote {len(log.records)} step records to {out}")
    return paths


def load_results_jsonl(path: Union[str, Path]) -> List[StepRecord]:
    """Re-read the step records written by emit_results in jsonl format."""
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(StepRecord.from_dict(json.loads(line)))
    return records
