"""
SoftHand -> belt feedback mappings.

Hand closure (encoder ticks) drives the belt slide; residual current drives
the belt squeeze. Each signal has a linear and a nonlinear map. The
nonlinear maps exist in two variants:

``verbatim``
    the published closed forms with the published constants.
``projected``
    the same families re-parametrized so that 0 -> 0, 2/3 -> 1/3 and
    1 -> 1 (exponential) or the full-scale input lands on the full-scale
    output (logarithmic).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MappingConfig",
    "CombinedCommand",
    "map_linear_position",
    "map_linear_force",
    "map_exponential",
    "map_logarithmic",
    "exponential_projection",
    "combined_schedule",
    "mapping_table",
    "write_mapping_table",
    "POSITION_MAPS",
    "FORCE_MAPS",
]

VARIANTS = ("verbatim", "projected")
LOG_BASES = ("natural", "ten")


@dataclass(frozen=True)
class MappingConfig:
    """Full-scale values and mapping constants.

    ``rc_SHmax`` has no sensible default and must be given.
    """

    rc_SHmax: float
    p_SHmax: float = 19000.0
    p_Cmax: float = 2334.0
    rc_Cmax: float = 756.0
    gain: float = 0.4
    alpha: float = 0.1547
    beta: float = 1.944
    gamma: float = 0.9510
    delta: float = -0.3317
    variant: str = "projected"
    log_base: str = "natural"
    dwell: float = 0.0

    def __post_init__(self):
        for name in ("p_SHmax", "p_Cmax", "rc_SHmax", "rc_Cmax"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.log_base not in LOG_BASES:
            raise ValueError(f"log_base must be one of {LOG_BASES}")
        if not 1.0 - self.delta > 0:
            raise ValueError("1 - delta must be positive for the logarithmic map")
        if self.dwell < 0:
            raise ValueError("dwell must be non-negative")

    def log(self, x):
        return np.log(x) if self.log_base == "natural" else np.log10(x)


def exponential_projection() -> tuple[float, float]:
    """(a, b) such that a (e^{b x} - 1) maps 0->0, 2/3->1/3 and 1->1.

    With u = e^{b/3} the two conditions reduce to u^2 - 2u - 2 = 0.
    """
    b = 3.0 * math.log(1.0 + math.sqrt(3.0))
    a = 1.0 / math.expm1(b)
    return a, b


def _clamp(x, hi):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    flag = (x < 0) | (x > hi)
    return np.clip(x, 0.0, hi), flag


def _out(value, flag, with_flag):
    if np.ndim(value) == 0:
        value, flag = float(value), bool(flag)
    return (value, flag) if with_flag else value


def map_linear_position(p_SHmeas, cfg: MappingConfig, with_flag: bool = False):
    """p_Cref = p_SHmeas / p_SHmax * p_Cmax; inputs outside [0, p_SHmax] are clamped."""
    x, flag = _clamp(p_SHmeas, cfg.p_SHmax)
    return _out(x / cfg.p_SHmax * cfg.p_Cmax, flag, with_flag)


def map_linear_force(rc_SHmeas, cfg: MappingConfig, with_flag: bool = False):
    """r_Cref = rc_SHmeas * gain. Negative currents are clamped to zero."""
    x = np.asarray(rc_SHmeas, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    flag = x < 0
    return _out(np.maximum(x, 0.0) * cfg.gain, flag, with_flag)


def map_exponential(p_SHmeas, cfg: MappingConfig, with_flag: bool = False):
    x, flag = _clamp(p_SHmeas, cfg.p_SHmax)
    x = x / cfg.p_SHmax
    if cfg.variant == "verbatim":
        y = cfg.alpha * np.exp(-cfg.beta * x)
    else:
        a, b = exponential_projection()
        y = a * np.expm1(b * x)
    return _out(y * cfg.p_Cmax, flag, with_flag)


def map_logarithmic(rc_SHmeas, cfg: MappingConfig, with_flag: bool = False):
    x, flag = _clamp(rc_SHmeas, cfg.rc_SHmax)
    arg = 1.0 - cfg.delta * (x / cfg.rc_SHmax)
    if np.any(arg <= 0):
        raise ValueError("logarithm argument must be positive")
    y = cfg.gamma * cfg.log(arg)
    if cfg.variant == "projected":
        y = y / (cfg.gamma * cfg.log(1.0 - cfg.delta))
    return _out(y * cfg.rc_Cmax, flag, with_flag)


POSITION_MAPS = {"linear": map_linear_position, "exponential": map_exponential}
FORCE_MAPS = {"linear": map_linear_force, "logarithmic": map_logarithmic}


@dataclass(frozen=True)
class CombinedCommand:
    """Slide first, then squeeze after ``dwell`` seconds."""

    slide: float
    squeeze: float
    dwell: float

    def phases(self) -> list[tuple[str, float]]:
        return [("slide", self.slide), ("squeeze", self.squeeze)]


def combined_schedule(p_SHmeas: float, rc_SHmeas: float, cfg: MappingConfig,
                      position_map: str = "linear", force_map: str = "linear") -> CombinedCommand:
    slide = POSITION_MAPS[position_map](p_SHmeas, cfg)
    squeeze = FORCE_MAPS[force_map](rc_SHmeas, cfg)
    return CombinedCommand(float(slide), float(squeeze), cfg.dwell)


def mapping_table(cfg: MappingConfig, n: int = 101) -> dict[str, np.ndarray]:
    """Every mapping sampled on ``n`` evenly spaced inputs across its domain."""
    p = np.linspace(0.0, cfg.p_SHmax, n)
    rc = np.linspace(0.0, cfg.rc_SHmax, n)
    return {
        "p_SHmeas": p,
        "linear_position": map_linear_position(p, cfg),
        "exponential": map_exponential(p, cfg),
        "rc_SHmeas": rc,
        "linear_force": map_linear_force(rc, cfg),
        "logarithmic": map_logarithmic(rc, cfg),
    }


def write_mapping_table(cfg: MappingConfig, path, n: int = 101) -> None:
    table = mapping_table(cfg, n)
    cols = list(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in zip(*(table[c] for c in cols)):
            w.writerow([repr(float(v)) for v in row])
