"""
Characterization of the belt over a set of rigid cylinders and the cubic
force -> position fit used to command forces.

Each trial pre-tensions the belt, runs one slow tighten-release ramp in
position mode and logs (position, current, force) at 100 Hz. The pooled
samples are fitted with a zero-intercept cubic ``p = c3 F^3 + c2 F^2 + c1 F``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .control import (
    ControlMode,
    Device,
    PretensionError,
    pretension,
    profile_tighten_release,
)
from .plant import ArmLoadModel, Plant, PlantConfig, radius_gain

__all__ = [
    "DEFAULT_SIZES",
    "CharacterizationNoise",
    "CharacterizationDataset",
    "InvalidTrial",
    "CubicFit",
    "FitError",
    "DatasetError",
    "ValidationResult",
    "run_characterization",
    "fit_force_to_position",
    "validate_fit",
    "invert_fit",
    "load_dataset",
    "save_dataset",
    "synthetic_dataset",
]

DEFAULT_SIZES = (80.0, 85.0, 90.0, 100.0, 115.0)
COLUMNS = ("size", "repetition", "phase", "position", "current", "force")
PHASES = ("tighten", "release")


class FitError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class CharacterizationNoise:
    """Measurement and fixture variability for simulated characterization.

    ``seating_sd`` is belt seating variability expressed in N: the belt
    position at which a given force develops wanders by ``seating_sd``
    times the local curve slope. ``force_sd`` is load-cell noise (N),
    ``position_sd`` extra position noise (ticks), ``gain_spread`` the
    fractional curve-gain swing across the fixture set and ``fixture_sd``
    a per-trial gain jitter. Pretension variability comes from the load model.
    """

    seating_sd: float = 0.9
    force_sd: float = 0.05
    position_sd: float = 0.0
    gain_spread: float = 0.05
    fixture_sd: float = 0.0
    vary_pretension: bool = False

    def __post_init__(self):
        for name in ("seating_sd", "force_sd", "position_sd", "gain_spread", "fixture_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def none(cls) -> "CharacterizationNoise":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, False)


@dataclass(frozen=True)
class InvalidTrial:
    size: float
    repetition: int
    reason: str


@dataclass
class CharacterizationDataset:
    """Column-oriented characterization samples.

    ``size`` labels the fixture (mm) and ``phase`` is 0 for tighten, 1 for
    release. Positions are ticks relative to the pre-tension zero.
    """

    size: np.ndarray
    repetition: np.ndarray
    phase: np.ndarray
    position: np.ndarray
    current: np.ndarray
    force: np.ndarray
    invalid: list = field(default_factory=list)
    reference: str = "position"
    zero_offsets: dict = field(default_factory=dict)  # (size, repetition) -> plant-frame zero, not saved

    def __post_init__(self):
        self.size = np.asarray(self.size, dtype=float)
        self.repetition = np.asarray(self.repetition, dtype=int)
        self.phase = np.asarray(self.phase, dtype=int)
        self.position = np.asarray(self.position, dtype=float)
        self.current = np.asarray(self.current, dtype=float)
        self.force = np.asarray(self.force, dtype=float)
        n = len(self.force)
        for name in COLUMNS:
            if len(getattr(self, name)) != n:
                raise DatasetError(f"column {name!r} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.force)

    @classmethod
    def concat(cls, parts: list["CharacterizationDataset"]) -> "CharacterizationDataset":
        if not parts:
            return cls.empty()
        cols = {c: np.concatenate([getattr(p, c) for p in parts]) for c in COLUMNS}
        invalid = [t for p in parts for t in p.invalid]
        return cls(**cols, invalid=invalid, reference=parts[0].reference)

    @classmethod
    def empty(cls) -> "CharacterizationDataset":
        return cls(*(np.empty(0) for _ in COLUMNS))

    def subset(self, mask) -> "CharacterizationDataset":
        mask = np.asarray(mask)
        return CharacterizationDataset(
            **{c: getattr(self, c)[mask] for c in COLUMNS}, invalid=list(self.invalid), reference=self.reference
        )

    def tighten_only(self) -> "CharacterizationDataset":
        return self.subset(self.phase == 0)

    def split_by_repetition(self, holdout: set | list) -> tuple["CharacterizationDataset", "CharacterizationDataset"]:
        """(train, holdout) split on repetition index."""
        mask = np.isin(self.repetition, list(holdout))
        return self.subset(~mask), self.subset(mask)

    def equals(self, other: "CharacterizationDataset") -> bool:
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in COLUMNS) and \
            self.invalid == other.invalid


@dataclass(frozen=True)
class CubicFit:
    c3: float
    c2: float
    c1: float
    adjusted_r2: float
    n: int
    rmse_validation: float | None = None

    @property
    def coefficients(self) -> tuple[float, float, float]:
        return (self.c3, self.c2, self.c1)

    def position(self, force):
        F = np.asarray(force, dtype=float)
        return ((self.c3 * F + self.c2) * F + self.c1) * F

    def slope(self, force):
        F = np.asarray(force, dtype=float)
        return (3 * self.c3 * F + 2 * self.c2) * F + self.c1

    def with_rmse(self, rmse: float) -> "CubicFit":
        return CubicFit(self.c3, self.c2, self.c1, self.adjusted_r2, self.n, float(rmse))

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> "CubicFit":
        if isinstance(source, (str, Path)) and Path(source).suffix == ".json":
            source = Path(source).read_text()
        d = json.loads(source)
        return cls(**{k: d[k] for k in ("c3", "c2", "c1", "adjusted_r2", "n")},
                   rmse_validation=d.get("rmse_validation"))


@dataclass(frozen=True)
class ValidationResult:
    rmse: float
    predicted: np.ndarray
    clamped: np.ndarray  # rows whose position fell outside the invertible range

    @property
    def n_clamped(self) -> int:
        return int(self.clamped.sum())


# ---------------------------------------------------------------------------
# simulation harness


def _trial_load(size: float, noise: CharacterizationNoise, base: ArmLoadModel,
                rng: np.random.Generator) -> ArmLoadModel:
    gain = radius_gain(size, noise.gain_spread)
    if noise.fixture_sd > 0:
        gain *= 1.0 + noise.fixture_sd * rng.standard_normal()
    pre = base.pretension_force
    if noise.vary_pretension and base.pretension_sd > 0:
        pre = abs(base.pretension_force + base.pretension_sd * rng.standard_normal())
    return ArmLoadModel(radius=size, force_curve=base.force_curve, pretension_force=pre,
                        pretension_sd=base.pretension_sd, gain=gain, slack=base.slack,
                        max_force=base.max_force)


def run_characterization(
    cfg: PlantConfig | None = None,
    sizes=DEFAULT_SIZES,
    reps: int = 10,
    noise: CharacterizationNoise | None = None,
    seed: int | np.random.Generator | None = 0,
    target: float = 650.0,
    rise: float = 60.0,
    fall: float = 60.0,
    sample_rate: float = 100.0,
    mode: ControlMode = ControlMode.POSITION_CURRENT,
    base_load: ArmLoadModel | None = None,
    gains=None,
) -> CharacterizationDataset:
    """Pre-tension and run one tighten-release ramp per size and repetition.

    Every trial gets a fresh plant. A pre-tension failure marks the trial
    invalid (kept in ``invalid``) and the run continues.
    """
    sizes = list(sizes)
    if not sizes:
        raise ValueError("at least one fixture size is required")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    cfg = cfg or PlantConfig()
    noise = noise if noise is not None else CharacterizationNoise()
    base_load = base_load or ArmLoadModel()
    rng = np.random.default_rng(seed)
    every = max(1, int(round(1.0 / (sample_rate * cfg.dt))))
    parts, invalid, zeros = [], [], {}
    for size in sizes:
        for rep in range(reps):
            load = _trial_load(size, noise, base_load, rng)
            dev = Device(Plant(cfg, load), gains=gains, mode=mode)
            try:
                zero = pretension(dev)
            except PretensionError as exc:
                invalid.append(InvalidTrial(float(size), rep, str(exc)))
                continue
            zeros[(float(size), rep)] = zero.zero_offset
            prof = profile_tighten_release(target, rise, fall, cfg.dt)
            tr = dev.run(prof, log_every=every)
            pos = tr.net_tighten - zero.zero_offset
            n = len(pos)
            phase = np.zeros(n, dtype=int)
            phase[int(np.argmax(prof[::every][:n])) + 1:] = 1
            c3, c2, c1 = load.force_curve
            slope = load.gain * ((3 * c3 * tr.force + 2 * c2) * tr.force + c1)
            pos = pos + (noise.seating_sd * slope + noise.position_sd) * rng.standard_normal(n)
            force = tr.force + noise.force_sd * rng.standard_normal(n)
            parts.append(CharacterizationDataset(
                np.full(n, float(size)), np.full(n, rep), phase, pos, tr.current_total,
                np.maximum(force, 0.0), reference=mode.value,
            ))
    data = CharacterizationDataset.concat(parts)
    data.invalid = invalid
    data.reference = mode.value
    data.zero_offsets = zeros
    return data


def synthetic_dataset(coefficients=(0.1138, -5.204, 89.22), forces=None, position_sd: float = 0.0,
                      seed: int | None = 0, size: float = 80.0) -> CharacterizationDataset:
    """Samples lying on a cubic, optionally with Gaussian position noise."""
    c3, c2, c1 = coefficients
    F = np.linspace(0.0, 25.0, 251) if forces is None else np.asarray(forces, dtype=float)
    pos = ((c3 * F + c2) * F + c1) * F
    if position_sd > 0:
        pos = pos + position_sd * np.random.default_rng(seed).standard_normal(len(F))
    n = len(F)
    return CharacterizationDataset(np.full(n, size), np.zeros(n, int), np.zeros(n, int), pos, np.zeros(n), F)


# ---------------------------------------------------------------------------
# fitting


def fit_force_to_position(data: CharacterizationDataset, tighten_only: bool = False,
                          max_force: float = 25.0) -> CubicFit:
    """Zero-intercept least squares of position on (F^3, F^2, F)."""
    if tighten_only:
        data = data.tighten_only()
    F, p = data.force, data.position
    if len(np.unique(F)) < 4:
        raise FitError(f"need at least 4 distinct force values, got {len(np.unique(F))}")
    X = np.column_stack([F**3, F**2, F])
    coef, _, rank, sv = np.linalg.lstsq(X, p, rcond=None)
    if rank < 3 or sv[-1] / sv[0] < 1e-12:
        raise FitError("design matrix is rank deficient")
    n = len(p)
    resid = p - X @ coef
    ss_tot = float(((p - p.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - 3)
    fit = CubicFit(float(coef[0]), float(coef[1]), float(coef[2]), float(adj), int(n))
    grid = np.linspace(0.0, max_force, 2501)
    if fit.slope(grid).min() <= 0:
        raise FitError("fitted curve is not strictly increasing on [0, %g] N" % max_force)
    return fit


def invert_fit(fit: CubicFit, position, max_force: float = 25.0, tol: float = 1e-10):
    """Monotone inverse of the fitted cubic on [0, max_force].

    Returns (force, clamped) arrays; out-of-range positions are clamped to
    the nearest end of the interval.
    """
    p = np.atleast_1d(np.asarray(position, dtype=float))
    lo_p, hi_p = 0.0, float(fit.position(max_force))
    clamped = (p < lo_p) | (p > hi_p)
    target = np.clip(p, lo_p, hi_p)
    # vectorised bisection then Newton polish
    lo = np.zeros_like(target)
    hi = np.full_like(target, max_force)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = fit.position(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < tol:
            break
    F = 0.5 * (lo + hi)
    for _ in range(3):
        F = np.clip(F - (fit.position(F) - target) / fit.slope(F), 0.0, max_force)
    if np.ndim(position) == 0:
        return float(F[0]), bool(clamped[0])
    return F, clamped


def validate_fit(fit: CubicFit, holdout: CharacterizationDataset, max_force: float = 25.0) -> ValidationResult:
    """RMSE (N) between holdout forces and the fit's inverse at their positions."""
    if len(holdout) == 0:
        raise ValueError("holdout dataset is empty")
    pred, clamped = invert_fit(fit, holdout.position, max_force)
    rmse = float(np.sqrt(np.mean((pred - holdout.force) ** 2)))
    return ValidationResult(rmse, pred, clamped)


# ---------------------------------------------------------------------------
# CSV


def save_dataset(data: CharacterizationDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# reference={data.reference}\n")
        for t in data.invalid:
            fh.write(f"# invalid size={t.size!r} repetition={t.repetition} reason={t.reason}\n")
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for i in range(len(data)):
            w.writerow([repr(float(data.size[i])), int(data.repetition[i]), PHASES[data.phase[i]],
                        repr(float(data.position[i])), repr(float(data.current[i])), repr(float(data.force[i]))])


def _parse_comment(line: str, data_meta: dict) -> None:
    body = line[1:].strip()
    if body.startswith("reference="):
        data_meta["reference"] = body.split("=", 1)[1]
    elif body.startswith("invalid "):
        head, _, reason = body[len("invalid "):].partition(" reason=")
        kv = dict(item.split("=", 1) for item in head.split())
        data_meta["invalid"].append(InvalidTrial(float(kv["size"]), int(kv["repetition"]), reason))


def load_dataset(path) -> CharacterizationDataset:
    meta = {"reference": "position", "invalid": []}
    cols = {c: [] for c in COLUMNS}
    header = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                _parse_comment(line, meta)
                continue
            row = next(csv.reader([line]))
            if header is None:
                header = [h.strip() for h in row]
                missing = [c for c in COLUMNS if c not in header]
                if missing:
                    raise DatasetError(f"{path}: missing column(s) {', '.join(missing)}")
                idx = {c: header.index(c) for c in COLUMNS}
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for c in COLUMNS:
                raw = row[idx[c]].strip()
                try:
                    if c == "phase":
                        if raw not in PHASES:
                            raise ValueError
                        val = PHASES.index(raw)
                    elif c == "repetition":
                        val = int(raw)
                    else:
                        val = float(raw)
                        if not math.isfinite(val):
                            raise ValueError
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: bad {c} value {raw!r}") from None
                cols[c].append(val)
    if header is None:
        raise DatasetError(f"{path}: no header row")
    return CharacterizationDataset(**{c: np.array(v) for c, v in cols.items()},
                                   invalid=meta["invalid"], reference=meta["reference"])
