"""
Surrogate of the SoftHand grasp signals: closure position (ticks) and
residual current (mA) while the hand closes on a cylinder.

The hand is a position servo with a current ceiling. Closing on an object,
the fingers meet it at a contact position that decreases with diameter;
past contact the object pushes back with its stiffness and the residual
current is that push, expressed in mA.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GraspObject",
    "GraspSignal",
    "SoftHandConfig",
    "SoftHandSim",
    "SignalError",
    "simulate_grasp",
    "contact_position",
    "grasp_force_estimate",
    "break_check",
    "BreakResult",
    "record",
    "playback",
    "STANDARD_OBJECTS",
]

KINDS = ("rigid", "soft", "none")


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class GraspObject:
    """Cylinder in the palm. ``stiffness`` is N per tick of finger travel."""

    diameter: float = 0.0
    stiffness: float = 0.0
    kind: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.kind != "none" and not self.diameter > 0:
            raise ValueError("physical objects need a positive diameter")
        if self.stiffness < 0:
            raise ValueError("stiffness must be non-negative")

    @classmethod
    def rigid(cls, diameter: float, stiffness: float = 0.4) -> "GraspObject":
        return cls(diameter, stiffness, "rigid")

    @classmethod
    def soft(cls, diameter: float, stiffness: float = 0.004) -> "GraspObject":
        return cls(diameter, stiffness, "soft")

    @classmethod
    def empty(cls) -> "GraspObject":
        return cls()

    @property
    def label(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}_{self.diameter:g}mm"


STANDARD_OBJECTS = {
    "none": GraspObject.empty(),
    "40": GraspObject.rigid(40.0),
    "60": GraspObject.rigid(60.0),
    "80": GraspObject.rigid(80.0),
}


@dataclass(frozen=True)
class SoftHandConfig:
    p_SHmax: float = 19000.0
    open_diameter: float = 250.0  # contact reaches 0 ticks at this diameter
    servo_gain: float = 0.25  # mA per tick of position error
    time_constant: float = 0.15  # s, free closure
    current_max: float = 1500.0  # mA
    k_f: float = 0.04  # N per mA
    rc_noise: float = 1.0  # mA, SD of residual current noise
    sample_rate: float = 1000.0

    def __post_init__(self):
        for name in ("p_SHmax", "open_diameter", "servo_gain", "time_constant", "current_max",
                     "k_f", "sample_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rc_noise < 0:
            raise ValueError("rc_noise must be non-negative")

    @property
    def rc_noise_bound(self) -> float:
        """Residual current treated as 'no contact' (5 noise SDs)."""
        return max(5.0 * self.rc_noise, 1e-9)


def contact_position(diameter: float, cfg: SoftHandConfig = SoftHandConfig()) -> float:
    """Closure ticks at which the fingers first touch a cylinder."""
    if diameter <= 0:
        return math.inf
    return max(0.0, cfg.p_SHmax * (1.0 - diameter / cfg.open_diameter))


@dataclass
class GraspSignal:
    p_SHmeas: np.ndarray
    rc_SHmeas: np.ndarray
    sample_rate: float = 1000.0
    label: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p_SHmeas = np.asarray(self.p_SHmeas, dtype=float)
        self.rc_SHmeas = np.asarray(self.rc_SHmeas, dtype=float)
        if self.p_SHmeas.shape != self.rc_SHmeas.shape:
            raise SignalError("position and residual current series differ in length")
        if not self.sample_rate > 0:
            raise SignalError("sample_rate must be positive")

    def __len__(self) -> int:
        return len(self.p_SHmeas)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) / self.sample_rate

    @property
    def final(self) -> tuple[float, float]:
        return float(self.p_SHmeas[-1]), float(self.rc_SHmeas[-1])

    def equals(self, other: "GraspSignal") -> bool:
        return (self.sample_rate == other.sample_rate and np.array_equal(self.p_SHmeas, other.p_SHmeas)
                and np.array_equal(self.rc_SHmeas, other.rc_SHmeas) and self.label == other.label)


class SoftHandSim:
    """Step-wise hand model, usable live (one sample per call) or in bulk."""

    def __init__(self, obj: GraspObject, cfg: SoftHandConfig | None = None, seed: int | None = 0):
        self.obj = obj
        self.cfg = cfg or SoftHandConfig()
        self.rng = np.random.default_rng(seed)
        self.p = 0.0
        self.contact = contact_position(obj.diameter, self.cfg) if obj.kind != "none" else math.inf
        # object stiffness in mA per tick
        self._s = obj.stiffness / self.cfg.k_f if obj.kind != "none" else 0.0

    def push(self) -> float:
        """Current the object returns at the present position (mA)."""
        pen = self.p - self.contact
        return min(self._s * pen, self.cfg.current_max) if pen > 0 else 0.0

    def step(self, closure_cmd: float) -> tuple[float, float]:
        cfg = self.cfg
        dt = 1.0 / cfg.sample_rate
        scale = cfg.servo_gain * cfg.time_constant
        # explicit Euler, sub-stepped so the stiffest regime stays monotone
        n_sub = max(1, math.ceil(2.0 * dt * (cfg.servo_gain + self._s) / scale))
        h = dt / n_sub
        for _ in range(n_sub):
            drive = min(cfg.servo_gain * (closure_cmd - self.p), cfg.current_max)
            self.p = min(self.p + h * (drive - self.push()) / scale, cfg.p_SHmax)
        rc = self.push()
        if cfg.rc_noise > 0:
            rc += cfg.rc_noise * self.rng.standard_normal()
        return self.p, max(rc, 0.0)


def simulate_grasp(obj: GraspObject, closure_cmd: float, duration: float = 2.0,
                   cfg: SoftHandConfig | None = None, seed: int | None = 0) -> GraspSignal:
    cfg = cfg or SoftHandConfig()
    if closure_cmd > cfg.p_SHmax:
        raise ValueError(f"closure command {closure_cmd} exceeds p_SHmax {cfg.p_SHmax}")
    if not duration > 0:
        raise ValueError("duration must be positive")
    sim = SoftHandSim(obj, cfg, seed)
    n = int(round(duration * cfg.sample_rate))
    p = np.empty(n)
    rc = np.empty(n)
    for k in range(n):
        p[k], rc[k] = sim.step(closure_cmd)
    label = {"diameter": obj.diameter, "kind": obj.kind, "stiffness": obj.stiffness,
             "closure_cmd": float(closure_cmd), "seed": seed}
    return GraspSignal(p, rc, cfg.sample_rate, label)


def grasp_force_estimate(signal: GraspSignal | np.ndarray, k_f: float = 0.04) -> np.ndarray:
    """Grip force (N) from residual current: k_f * rc."""
    if not k_f > 0:
        raise ValueError("k_f must be positive")
    rc = signal.rc_SHmeas if isinstance(signal, GraspSignal) else np.asarray(signal, dtype=float)
    return k_f * rc


@dataclass(frozen=True)
class BreakResult:
    broken: bool
    index: int | None = None
    time: float | None = None

    def __bool__(self) -> bool:
        return self.broken


def break_check(force, threshold: float = 35.0, sample_rate: float = 1000.0) -> BreakResult:
    """Broken iff any sample reaches ``threshold``; reports the first such sample."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    f = np.asarray(force, dtype=float)
    hits = np.flatnonzero(f >= threshold)
    if hits.size == 0:
        return BreakResult(False)
    i = int(hits[0])
    return BreakResult(True, i, i / sample_rate)


# ---------------------------------------------------------------------------
# record / playback

HEADER = ["t_s", "p_sh_ticks", "rc_sh_mA"]


def record(signal: GraspSignal, path) -> None:
    """Write the signal as CSV plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for k in range(len(signal)):
            w.writerow([repr(k / signal.sample_rate), repr(float(signal.p_SHmeas[k])),
                        repr(float(signal.rc_SHmeas[k]))])
    meta = dict(signal.label, sample_rate=signal.sample_rate, n_samples=len(signal))
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def playback(path, sample_rate: float | None = None) -> GraspSignal:
    """Load a recorded signal. ``sample_rate`` (if given) must match the file."""
    path = Path(path)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    rate = float(meta.pop("sample_rate", sample_rate or 1000.0))
    n_expected = meta.pop("n_samples", None)
    if sample_rate is not None and not math.isclose(rate, sample_rate):
        raise SignalError(f"{path}: recorded at {rate} Hz, expected {sample_rate} Hz")
    t, p, rc = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise SignalError(f"{path}: header must be {','.join(HEADER)}")
        for k, row in enumerate(reader):
            if len(row) != 3:
                raise SignalError(f"{path}: sample {k} is truncated ({len(row)} of 3 fields)")
            try:
                tk, pk, rk = (float(v) for v in row)
            except ValueError:
                raise SignalError(f"{path}: sample {k} is not numeric") from None
            if not math.isclose(tk, k / rate, rel_tol=1e-9, abs_tol=1e-9):
                raise SignalError(f"{path}: sample {k} at t={tk} does not match {rate} Hz")
            t.append(tk)
            p.append(pk)
            rc.append(rk)
    if n_expected is not None and len(p) != n_expected:
        raise SignalError(f"{path}: truncated at sample {len(p)}, expected {n_expected} samples")
    return GraspSignal(np.array(p), np.array(rc), rate, meta)
