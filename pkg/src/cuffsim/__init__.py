"""Simulation and analysis toolkit for a two-motor belt haptic device driven by a robotic hand."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .plant import ArmLoadModel, Plant, PlantConfig, belt_force, invert_curve
from .control import CascadeGains, ControlMode, Device, pretension, rescale
from .calibration import CharacterizationNoise, fit_force_to_position, run_characterization
from .mapping import MappingConfig
from .softhand import GraspObject, SoftHandConfig, simulate_grasp
from .psychophysics import ObserverTruth, fit_glmm, fit_probit_glm, run_discrimination

__all__ = [
    "__version__",
    "ArmLoadModel",
    "Plant",
    "PlantConfig",
    "belt_force",
    "invert_curve",
    "CascadeGains",
    "ControlMode",
    "Device",
    "pretension",
    "rescale",
    "CharacterizationNoise",
    "fit_force_to_position",
    "run_characterization",
    "MappingConfig",
    "GraspObject",
    "SoftHandConfig",
    "simulate_grasp",
    "ObserverTruth",
    "fit_glmm",
    "fit_probit_glm",
    "run_discrimination",
]
