"""
INI configuration covering every module.

Each section fills one config dataclass; keys are the dataclass field names
(matched case-insensitively) and values are parsed according to the type of
the field's default. Unknown sections or keys are errors, so typos surface
instead of silently falling back to defaults.

Sections: ``plant``, ``load``, ``control``, ``calibration``, ``mapping``,
``softhand``, ``psychophysics``, ``observer``, ``teleop``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .calibration import CharacterizationNoise
from .control import CascadeGains
from .mapping import MappingConfig
from .plant import ArmLoadModel, PlantConfig
from .psychophysics import DiscriminationObserver, ObserverTruth
from .softhand import SoftHandConfig

__all__ = ["Config", "ConfigError", "CalibrationSettings", "PsychophysicsSettings", "TeleopSettings",
           "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationSettings:
    reps: int = 10
    target: float = 650.0
    holdout_reps: int = 2
    seating_sd: float = 0.9
    force_sd: float = 0.05
    position_sd: float = 0.0
    gain_spread: float = 0.05
    fixture_sd: float = 0.0
    vary_pretension: bool = False

    def noise(self) -> CharacterizationNoise:
        return CharacterizationNoise(self.seating_sd, self.force_sd, self.position_sd, self.gain_spread,
                                     self.fixture_sd, self.vary_pretension)


@dataclass(frozen=True)
class PsychophysicsSettings:
    tangential_pse: float = 17.42
    tangential_jnd: float = 2.91
    force_pse: float = 9.75
    force_jnd: float = 2.21
    n_subjects: int = 11
    intercept_sd: float = 0.0
    slope_sd: float = 0.0
    glmm_nodes: int = 15

    def truth(self, channel: str) -> ObserverTruth:
        if channel.startswith("tangential"):
            return ObserverTruth(self.tangential_pse, self.tangential_jnd)
        return ObserverTruth(self.force_pse, self.force_jnd)


@dataclass(frozen=True)
class TeleopSettings:
    period: float = 0.001  # s, master loop period
    timeout_ticks: int = 10
    corrupt_prob: float = 0.0
    position_map: str = "linear"
    force_map: str = "linear"
    closure_cmd: float = 18000.0


# section -> (attribute on Config, dataclass)
SECTIONS = {
    "plant": ("plant", PlantConfig),
    "load": ("load", ArmLoadModel),
    "control": ("gains", CascadeGains),
    "calibration": ("calibration", CalibrationSettings),
    "mapping": ("mapping_values", MappingConfig),
    "softhand": ("softhand", SoftHandConfig),
    "psychophysics": ("psychophysics", PsychophysicsSettings),
    "observer": ("observer", DiscriminationObserver),
    "teleop": ("teleop", TeleopSettings),
}


@dataclass(frozen=True)
class Config:
    plant: PlantConfig = field(default_factory=PlantConfig)
    load: ArmLoadModel = field(default_factory=ArmLoadModel)
    gains: CascadeGains = field(default_factory=CascadeGains)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    mapping_values: dict = field(default_factory=dict)  # MappingConfig needs rc_SHmax, so kept raw
    softhand: SoftHandConfig = field(default_factory=SoftHandConfig)
    psychophysics: PsychophysicsSettings = field(default_factory=PsychophysicsSettings)
    observer: DiscriminationObserver = field(default_factory=DiscriminationObserver)
    teleop: TeleopSettings = field(default_factory=TeleopSettings)
    source: str | None = None

    def mapping(self, **overrides) -> MappingConfig:
        """Resolve the mapping section; ``rc_SHmax`` must come from the file or an override."""
        values = dict(self.mapping_values, **{k: v for k, v in overrides.items() if v is not None})
        if "rc_SHmax" not in values:
            raise ConfigError("mapping.rc_SHmax is not set (add it to [mapping] or pass --rc-shmax)")
        try:
            return MappingConfig(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[mapping]: {exc}") from None

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, (attr, _) in SECTIONS.items():
            obj = getattr(self, attr)
            items = obj.items() if isinstance(obj, dict) else dataclasses.asdict(obj).items()
            cp[section] = {k: _format(v) for k, v in items}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "yes", "true", "on"):
                return True
            if low in ("0", "no", "false", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _section_values(section: str, cls, items) -> dict:
    specs = {f.name.lower(): f for f in fields(cls) if f.init}
    out = {}
    for key, raw in items:
        f = specs.get(key.lower())
        if f is None:
            raise ConfigError(f"[{section}] unknown key {key!r}; valid keys: {', '.join(sorted(s.name for s in specs.values()))}")
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = 0.0  # required numeric field (rc_SHmax)
        out[f.name] = _convert(section, key, raw, default)
    return out


def parse_config(text: str, source: str | None = None) -> Config:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    kwargs = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; valid sections: {', '.join(SECTIONS)}")
        attr, cls = SECTIONS[section]
        values = _section_values(section, cls, cp.items(section))
        if attr == "mapping_values":
            kwargs[attr] = values
            continue
        try:
            kwargs[attr] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return Config(**kwargs, source=source)


def load_config(path=None) -> Config:
    """Defaults when ``path`` is None; otherwise parse the INI file."""
    if path is None:
        return Config()
    path = Path(path)
    return parse_config(path.read_text(), str(path))
