import math
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# (v, q) breakpoints, q as a fraction of the reactive capability
DEFAULT_QV_POINTS: Tuple[Tuple[float, float], ...] = (
    (0.93, 1.0),
    (0.97, 0.0),
    (1.03, 0.0),
    (1.07, -1.0),
)


@dataclass(frozen=True)
class QLimits:
    """Reactive capability of one asset in per-unit on the system base."""

    q_min: float = -math.inf
    q_max: float = math.inf
    s_max: float = math.inf

    def bounds(self, p: float) -> Tuple[float, float]:
        """
        Admissible q interval at active power p.

        Args:
            p: Active power injection in per-unit

        Returns:
            Tuple[float, float]: (lower, upper) bound, intersecting the q box with the s_max circle
        """
        lo, hi = self.q_min, self.q_max
        if math.isfinite(self.s_max):
            circle = math.sqrt(max(self.s_max ** 2 - p ** 2, 0.0))
            lo, hi = max(lo, -circle), min(hi, circle)
        if lo > hi:
            lo = hi = min(max(0.0, lo), hi)
        return lo, hi

    def clamp(self, q: float, p: float) -> float:
        lo, hi = self.bounds(p)
        return min(max(q, lo), hi)


@dataclass(frozen=True)
class FixedCosPhi:
    cos_phi: float = 0.95
    underexcited: bool = True


@dataclass(frozen=True)
class QofV:
    points: Tuple[Tuple[float, float], ...] = DEFAULT_QV_POINTS


@dataclass(frozen=True)
class QofP:
    """Q(P) law; p as a fraction of s_max, q as a fraction of the reactive capability."""

    points: Tuple[Tuple[float, float], ...] = ((0.0, 0.0), (0.5, 0.0), (1.0, -1.0))


@dataclass(frozen=True)
class DirectSetpoint:
    q: float = 0.0


@dataclass(frozen=True)
class ConstantQ:
    q: float = 0.0


@dataclass(frozen=True)
class FallbackProfile:
    """
    Externally set q with an autonomous law for communication loss.

    `q` is the setpoint held in coordinated operation, `profile` the law applied once no
    fresh setpoint is available (None selects the default Q(V) curve).
    """

    q: float = 0.0
    profile: Optional[Union[QofV, ConstantQ]] = None


ControlCharacteristic = Union[FixedCosPhi, QofV, QofP, DirectSetpoint, ConstantQ, FallbackProfile]


class FallbackMode(str, Enum):
    PROFILE = "profile"
    DEFAULT_QV = "default_qv"


def check_breakpoints(points: Sequence[Tuple[float, float]]) -> Optional[str]:
    """Return an error message if the abscissae are not strictly increasing, else None."""
    if len(points) < 2:
        return "a characteristic needs at least two breakpoints"
    xs = [x for x, _ in points]
    if any(b <= a for a, b in zip(xs, xs[1:])):
        return f"breakpoints must be strictly increasing in abscissa, got {xs}"
    return None


def _interpolate(points: Sequence[Tuple[float, float]], x: float) -> float:
    xs = np.array([pt[0] for pt in points], dtype=float)
    ys = np.array([pt[1] for pt in points], dtype=float)
    # np.interp extrapolates flat beyond the end breakpoints
    return float(np.interp(x, xs, ys))


def _scale_fraction(fraction: float, limits: QLimits, p: float) -> float:
    lo, hi = limits.bounds(p)
    if fraction >= 0.0:
        return fraction * limits.q_max if math.isfinite(limits.q_max) else fraction * hi
    return fraction * -limits.q_min if math.isfinite(limits.q_min) else fraction * -lo


def is_voltage_dependent(c: ControlCharacteristic) -> bool:
    return isinstance(c, QofV)


def admits_setpoint(c: ControlCharacteristic) -> bool:
    return isinstance(c, (DirectSetpoint, FallbackProfile))


def setpoint_of(c: ControlCharacteristic) -> Optional[float]:
    """Stored external setpoint of a setpoint-driven characteristic, None for local laws."""
    if isinstance(c, (DirectSetpoint, FallbackProfile)):
        return c.q
    return None


def eval_characteristic(c: ControlCharacteristic, v: float, p: float, limits: QLimits) -> float:
    """
    Evaluate a reactive power law.

    Args:
        c: Control characteristic of the asset
        v: Terminal voltage magnitude in per-unit
        p: Active power injection in per-unit (generation positive)
        limits: Reactive capability of the asset

    Returns:
        float: Reactive power injection in per-unit, clamped into the capability
    """
    if isinstance(c, FixedCosPhi):
        tan_phi = math.tan(math.acos(min(max(c.cos_phi, 0.0), 1.0)))
        q = abs(p) * tan_phi
        q = -q if c.underexcited else q
    elif isinstance(c, QofV):
        q = _scale_fraction(_interpolate(c.points, v), limits, p)
    elif isinstance(c, QofP):
        if not math.isfinite(limits.s_max) or limits.s_max <= 0.0:
            q = 0.0
        else:
            q = _scale_fraction(_interpolate(c.points, p / limits.s_max), limits, p)
    elif isinstance(c, (DirectSetpoint, ConstantQ, FallbackProfile)):
        q = c.q
    else:
        raise TypeError(f"Unknown control characteristic: {c!r}")
    return limits.clamp(q, p)


def fallback_law(asset: Any, mode: FallbackMode = FallbackMode.PROFILE) -> ControlCharacteristic:
    """Law an asset follows autonomously; the default Q(V) curve when nothing else is configured."""
    control = asset.control
    if mode is FallbackMode.PROFILE and isinstance(control, FallbackProfile) and control.profile is not None:
        return control.profile
    return QofV()


def fallback_setpoint(asset: Any, mode: FallbackMode, local_v: float, local_p: Optional[float] = None) -> float:
    """
    Reactive power an asset applies when no central setpoint is fresh.

    Args:
        asset: Asset with `control`, `p` and `limits`
        mode: PROFILE uses the asset's configured fallback profile, DEFAULT_QV the default curve
        local_v: Locally measured voltage in per-unit
        local_p: Locally measured active power; the asset's own p when omitted

    Returns:
        float: q in per-unit
    """
    p = asset.p if local_p is None else local_p
    return eval_characteristic(fallback_law(asset, mode), local_v, p, asset.limits)
