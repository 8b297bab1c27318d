"""
Current-only and cascaded position/current control of the belt device,
together with the pre-tensioning and rescaling routines and the reference
profiles used during characterization.

Both loops are PI with conditional integration: an integrator is frozen
whenever its output is clamped and the error would drive it further into
the clamp.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .plant import (
    ArmLoadModel,
    Plant,
    PlantConfig,
    _invert,
    _load_params,
    _pair_step,
    _plant_params,
    curve_position,
    decompose,
)

__all__ = [
    "CascadeGains",
    "ControlMode",
    "RescaleMap",
    "PretensionResult",
    "PretensionError",
    "ArmTooSmallError",
    "CascadeController",
    "cascade_step",
    "Device",
    "Trace",
    "pretension",
    "rescale",
    "profile_tighten_release",
    "staircase_current",
    "loop_area",
    "HysteresisLoop",
    "hysteresis_loops",
]


class ControlMode(enum.Enum):
    CURRENT_ONLY = "current"
    POSITION_CURRENT = "position"
    OPEN_LOOP = "pwm"


_MODE_CODE = {ControlMode.OPEN_LOOP: 0, ControlMode.CURRENT_ONLY: 1, ControlMode.POSITION_CURRENT: 2}


@dataclass(frozen=True)
class CascadeGains:
    position_kp: float = 3.0  # mA per tick
    position_ki: float = 15.0  # mA per tick*s
    current_kp: float = 0.0005  # duty per mA
    current_ki: float = 0.25  # duty per mA*s
    current_ref_limit: float = 500.0  # mA

    def __post_init__(self):
        for name in ("position_kp", "position_ki", "current_kp", "current_ki", "current_ref_limit"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")

    def validate_for(self, cfg: PlantConfig) -> None:
        if self.current_ref_limit > cfg.current_limit:
            raise ValueError("current_ref_limit exceeds the plant current limit")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.position_kp, self.position_ki, self.current_kp, self.current_ki, self.current_ref_limit],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class RescaleMap:
    """Association of the stall position with the top of the force range.

    Positions are net tighten ticks in the plant frame.
    """

    zero_offset: float
    max_position: float
    max_force: float = 25.0
    curve: tuple = (0.1138, -5.204, 89.22)

    def __post_init__(self):
        if not self.max_position > self.zero_offset:
            raise ValueError("max_position must exceed zero_offset")

    @property
    def factor(self) -> float:
        """Stretch applied to the calibration curve's position axis."""
        top = float(curve_position(self.max_force, ArmLoadModel(force_curve=self.curve)))
        return (self.max_position - self.zero_offset) / top

    def position_for(self, force):
        """Net tighten (relative to zero) that should produce ``force``."""
        return self.factor * curve_position(force, ArmLoadModel(force_curve=self.curve))


class PretensionError(RuntimeError):
    pass


class ArmTooSmallError(ValueError):
    pass


# ---------------------------------------------------------------------------
# compiled loop


@njit(cache=True)
def _pi(err, integ, kp, ki, lim, dt):
    u = kp * err + integ
    out = u
    if u > lim:
        out = lim
    elif u < -lim:
        out = -lim
    if not ((u >= lim and err > 0.0) or (u <= -lim and err < 0.0)):
        integ += ki * err * dt
    return out, integ


@njit(cache=True)
def _cascade(p_ref, p_meas, i_meas, ctrl, off, g, dt):
    # ctrl[off]: position integrator, ctrl[off + 1]: current integrator
    i_ref, ctrl[off] = _pi(p_ref - p_meas, ctrl[off], g[0], g[1], g[4], dt)
    pwm, ctrl[off + 1] = _pi(i_ref - i_meas, ctrl[off + 1], g[2], g[3], 1.0, dt)
    return pwm, i_ref


@njit(cache=True)
def _current_loop(i_ref, i_meas, ctrl, off, g, dt):
    if i_ref > g[4]:
        i_ref = g[4]
    elif i_ref < -g[4]:
        i_ref = -g[4]
    pwm, ctrl[off + 1] = _pi(i_ref - i_meas, ctrl[off + 1], g[2], g[3], 1.0, dt)
    return pwm, i_ref


@njit(cache=True)
def _simulate(s, ctrl, pp, lp, skin, g, mode, refs, log_every, stop_mode, stop_level, hold, out):
    """Run closed loop over ``refs`` (n x 2). Returns (steps run, rows logged).

    stop_mode 1: both motors stalled for ``hold`` steps.
    stop_mode 2: both |currents| below ``stop_level`` for ``hold`` steps.
    """
    dt = pp[0]
    n = refs.shape[0]
    rows = 0
    count = 0
    for t in range(n):
        if mode == 0:
            ul = refs[t, 0]
            ur = refs[t, 1]
            irl = 0.0
            irr = 0.0
        elif mode == 1:
            ul, irl = _current_loop(refs[t, 0], s[2], ctrl, 0, g, dt)
            ur, irr = _current_loop(refs[t, 1], s[6], ctrl, 2, g, dt)
        else:
            ul, irl = _cascade(refs[t, 0], float(int(s[0])), s[2], ctrl, 0, g, dt)
            ur, irr = _cascade(refs[t, 1], float(int(s[4])), s[6], ctrl, 2, g, dt)
        stl, str_ = _pair_step(s, ul, ur, pp, lp, skin)
        ctrl[4] = irl
        ctrl[5] = irr
        if log_every > 0 and t % log_every == 0 and rows < out.shape[0]:
            tighten = 0.5 * (s[0] - s[4])
            d = tighten - lp[6]
            F = 0.0
            if d >= 0.0:
                F = max(_invert(d, lp[0], lp[1], lp[2], lp[3], lp[5])[0], lp[4])
            out[rows, 0] = t
            out[rows, 1] = s[0]
            out[rows, 2] = s[4]
            out[rows, 3] = s[2]
            out[rows, 4] = s[6]
            out[rows, 5] = F
            out[rows, 6] = 1.0 if (stl and str_) else 0.0
            out[rows, 7] = irl
            out[rows, 8] = irr
            rows += 1
        if stop_mode == 1:
            count = count + 1 if (stl and str_) else 0
            if count >= hold:
                return t + 1, rows
        elif stop_mode == 2:
            count = count + 1 if (abs(s[2]) < stop_level and abs(s[6]) < stop_level) else 0
            if count >= hold:
                return t + 1, rows
    return n, rows


@njit(cache=True)
def _release(s, ctrl, pp, lp, skin, g, eps, min_rate, max_rate, hold, max_steps):
    """Back both motors off their stall positions until both currents stay
    below ``eps`` for ``hold`` steps. The back-off rate shrinks with the
    current so viscous drag does not mask the belt tension. Returns the
    number of steps run, or -1 on timeout."""
    dt = pp[0]
    ref_l = s[0]
    ref_r = s[4]
    count = 0
    for t in range(max_steps):
        i_now = max(abs(s[2]), abs(s[6]))
        rate = min(max_rate, max(min_rate, 0.5 * (i_now - eps)))
        ref_l -= rate * dt
        ref_r += rate * dt
        ul, irl = _cascade(ref_l, float(int(s[0])), s[2], ctrl, 0, g, dt)
        ur, irr = _cascade(ref_r, float(int(s[4])), s[6], ctrl, 2, g, dt)
        _pair_step(s, ul, ur, pp, lp, skin)
        ctrl[4] = irl
        ctrl[5] = irr
        count = count + 1 if (abs(s[2]) < eps and abs(s[6]) < eps) else 0
        if count >= hold:
            return t + 1
    return -1


# ---------------------------------------------------------------------------
# single-step controller


@dataclass
class CascadeController:
    """Per-motor cascade state: the two integrators."""

    gains: CascadeGains = field(default_factory=CascadeGains)
    dt: float = 0.001
    position_integral: float = 0.0
    current_integral: float = 0.0
    last_current_ref: float = 0.0

    def step(self, p_ref: float, position: float, current: float) -> float:
        return cascade_step(p_ref, position, current, self)

    def reset(self) -> None:
        self.position_integral = self.current_integral = self.last_current_ref = 0.0


def cascade_step(p_ref: float, position: float, current: float, ctl: CascadeController) -> float:
    """One cascade update; returns the PWM duty and updates ``ctl`` in place.

    ``position`` is the encoder reading (ticks) and ``current`` the measured
    motor current (mA). The outer loop's current reference is kept in
    ``ctl.last_current_ref``.
    """
    for name, value in (("p_ref", p_ref), ("position", position), ("current", current)):
        if not math.isfinite(value):
            raise ValueError(f"non-finite {name}: {value!r}")
    state = np.array([ctl.position_integral, ctl.current_integral])
    pwm, i_ref = _cascade(float(p_ref), float(position), float(current), state, 0, ctl.gains.as_array(), ctl.dt)
    ctl.position_integral, ctl.current_integral = float(state[0]), float(state[1])
    ctl.last_current_ref = float(i_ref)
    return float(pwm)


# ---------------------------------------------------------------------------
# device: plant + two controllers


@dataclass
class Trace:
    t: np.ndarray
    p_left: np.ndarray
    p_right: np.ndarray
    i_left: np.ndarray
    i_right: np.ndarray
    force: np.ndarray
    stalled: np.ndarray
    i_ref_left: np.ndarray
    i_ref_right: np.ndarray
    slide_mm: np.ndarray

    @property
    def net_tighten(self) -> np.ndarray:
        return 0.5 * (self.p_left - self.p_right)

    @property
    def current_total(self) -> np.ndarray:
        return np.abs(self.i_left) + np.abs(self.i_right)

    def __len__(self) -> int:
        return len(self.t)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "p_left_ticks", "p_right_ticks", "i_left_mA", "i_right_mA", "force_N", "slide_mm"])
            for row in zip(self.t, self.p_left, self.p_right, self.i_left, self.i_right, self.force, self.slide_mm):
                w.writerow([repr(float(v)) for v in row])


class Device:
    """The plant driven by one controller per motor.

    References are given in belt coordinates relative to ``zero`` (the
    motor positions recorded by pre-tensioning): tighten moves the left motor
    forward and the right motor backward, slide moves both forward.
    """

    def __init__(self, plant: Plant | None = None, gains: CascadeGains | None = None,
                 mode: ControlMode = ControlMode.POSITION_CURRENT):
        self.plant = plant if plant is not None else Plant()
        self.gains = gains if gains is not None else CascadeGains(
            current_ref_limit=self.plant.cfg.current_limit)
        self.gains.validate_for(self.plant.cfg)
        self.mode = mode
        self.zero = (0.0, 0.0)
        self.ctrl = np.zeros(6)
        self.time = 0.0
        self._pp = _plant_params(self.plant.cfg)
        self._lp = _load_params(self.plant.load)

    @property
    def dt(self) -> float:
        return self.plant.cfg.dt

    def set_load(self, load: ArmLoadModel) -> None:
        self.plant.load = load
        self._lp = _load_params(load)

    def _state(self) -> np.ndarray:
        lft, rgt = self.plant.left, self.plant.right
        return np.array([lft.position, lft.velocity, lft.current, lft.pwm,
                         rgt.position, rgt.velocity, rgt.current, rgt.pwm], dtype=np.float64)

    def _store(self, s: np.ndarray, stalled: bool) -> None:
        lft, rgt = self.plant.left, self.plant.right
        lft.position, lft.velocity, lft.current, lft.pwm = (float(v) for v in s[:4])
        rgt.position, rgt.velocity, rgt.current, rgt.pwm = (float(v) for v in s[4:])
        lft.stalled = rgt.stalled = bool(stalled)

    def motor_refs(self, tighten, slide=None, mode: ControlMode | None = None) -> np.ndarray:
        mode = mode or self.mode
        tighten = np.atleast_1d(np.asarray(tighten, dtype=float))
        slide = np.zeros_like(tighten) if slide is None else np.broadcast_to(np.asarray(slide, float), tighten.shape)
        refs = np.empty((tighten.size, 2))
        refs[:, 0] = slide + tighten
        refs[:, 1] = slide - tighten
        if mode is ControlMode.POSITION_CURRENT:
            refs[:, 0] += self.zero[0]
            refs[:, 1] += self.zero[1]
        return refs

    def run(self, tighten, slide=None, mode: ControlMode | None = None, log_every: int = 1,
            stop: str | None = None, stop_level: float = 0.0, hold: int = 1) -> Trace:
        """Drive the device along a reference trajectory sampled at ``dt``."""
        mode = mode or self.mode
        refs = self.motor_refs(tighten, slide, mode)
        return self.run_motor_refs(refs, mode, log_every, stop, stop_level, hold)

    def run_motor_refs(self, refs: np.ndarray, mode: ControlMode, log_every: int = 1,
                       stop: str | None = None, stop_level: float = 0.0, hold: int = 1) -> Trace:
        refs = np.ascontiguousarray(refs, dtype=np.float64)
        if not np.all(np.isfinite(refs)):
            raise ValueError("non-finite reference")
        if mode is ControlMode.OPEN_LOOP and np.any(np.abs(refs) > 1.0):
            raise ValueError("pwm outside [-1, 1]")
        stop_code = {None: 0, "stall": 1, "low_current": 2}[stop]
        n_log = (len(refs) + log_every - 1) // log_every if log_every > 0 else 0
        out = np.zeros((n_log, 9))
        s = self._state()
        steps, rows = _simulate(s, self.ctrl, self._pp, self._lp, self.plant.cfg.skin_stiffness,
                                self.gains.as_array(), _MODE_CODE[mode], refs, log_every,
                                stop_code, float(stop_level), int(hold), out)
        self._store(s, bool(rows and out[rows - 1, 6]))
        if rows:
            self.plant.left.stalled = self.plant.right.stalled = bool(out[rows - 1, 6])
        out = out[:rows]
        t = self.time + (out[:, 0] + 1) * self.dt
        self.time += steps * self.dt
        self.last_steps = steps
        _, slide = decompose(out[:, 1], out[:, 2])
        return Trace(
            t=t, p_left=out[:, 1], p_right=out[:, 2], i_left=out[:, 3], i_right=out[:, 4],
            force=out[:, 5], stalled=out[:, 6].astype(bool), i_ref_left=out[:, 7], i_ref_right=out[:, 8],
            slide_mm=slide / self.plant.cfg.ticks_per_rev * math.pi * self.plant.cfg.roller_diameter,
        )

    def hold(self, seconds: float, log_every: int = 0) -> Trace:
        """Keep the current references (position mode: stay at the last target)."""
        n = max(1, int(round(seconds / self.dt)))
        if self.mode is ControlMode.POSITION_CURRENT:
            refs = np.repeat([[self.plant.left.position, self.plant.right.position]], n, axis=0)
            refs = np.trunc(refs)
        else:
            refs = np.zeros((n, 2))
        return self.run_motor_refs(refs, self.mode, log_every)

    # convenience readouts relative to zero
    def net_tighten(self) -> float:
        return 0.5 * ((self.plant.left.position - self.zero[0]) - (self.plant.right.position - self.zero[1]))

    def net_slide(self) -> float:
        return 0.5 * ((self.plant.left.position - self.zero[0]) + (self.plant.right.position - self.zero[1]))


# ---------------------------------------------------------------------------
# procedures


@dataclass(frozen=True)
class PretensionResult:
    zero_offset: float  # net tighten, plant frame
    zero_left: float
    zero_right: float
    residual_force: float
    duration: float


def _tighten_to_stall(device: Device, timeout: float, hold_s: float = 0.05) -> bool:
    """Command a far tighten target; True once both motors hold stall."""
    cfg = device.plant.cfg
    chunk = int(round(1.0 / device.dt))
    hold = max(1, int(round(hold_s / device.dt)))
    lp, rp = device.plant.left.position, device.plant.right.position
    far = 20.0 * cfg.ticks_per_rev
    elapsed = 0.0
    while elapsed < timeout:
        n = min(chunk, int(round((timeout - elapsed) / device.dt)))
        refs = np.repeat([[lp + far, rp - far]], n, axis=0)
        device.run_motor_refs(refs, ControlMode.POSITION_CURRENT, log_every=0, stop="stall", hold=hold)
        elapsed += device.last_steps * device.dt
        if device.last_steps < n:
            return True
    return False


def pretension(device: Device, release_epsilon: float = 10.0, timeout: float = 120.0,
               min_rate: float = 1.0, max_rate: float = 300.0, hold_s: float = 0.02) -> PretensionResult:
    """Tighten to stall, then back off until the motor currents fall below
    ``release_epsilon``. The motor positions reached become the device zero.
    """
    t0 = device.time
    if not _tighten_to_stall(device, timeout):
        raise PretensionError(f"stall not reached within {timeout} s")
    dt = device.dt
    chunk = max(1, int(round(0.01 / dt)))
    hold = max(1, int(round(hold_s / dt)))
    s = device._state()
    steps = _release(s, device.ctrl, device._pp, device._lp, device.plant.cfg.skin_stiffness,
                     device.gains.as_array(), float(release_epsilon), float(min_rate), float(max_rate),
                     hold, int(round(timeout / dt)))
    device._store(s, False)
    if steps < 0:
        raise PretensionError(f"current did not fall below {release_epsilon} mA during release")
    device.time += steps * dt
    zl, zr = float(int(device.plant.left.position)), float(int(device.plant.right.position))
    device.zero = (zl, zr)
    # settle on the recorded zero
    device.run_motor_refs(np.repeat([[zl, zr]], chunk, axis=0), ControlMode.POSITION_CURRENT, log_every=0)
    tighten, _ = decompose(zl, zr)
    return PretensionResult(
        zero_offset=tighten, zero_left=zl, zero_right=zr,
        residual_force=device.plant.normal_force(), duration=device.time - t0,
    )


def rescale(device: Device, zero: PretensionResult, max_force: float = 25.0, min_force: float = 5.0,
            timeout: float = 120.0, curve: tuple | None = None) -> RescaleMap:
    """Drive to the stall position and tie it to ``max_force``."""
    curve = curve or device.plant.load.force_curve
    if not _tighten_to_stall(device, timeout):
        raise PretensionError(f"stall not reached within {timeout} s")
    max_position, _ = decompose(float(int(device.plant.left.position)), float(int(device.plant.right.position)))
    # return to the zero before handing the device back
    n = int(round(2.0 / device.dt))
    device.run_motor_refs(np.repeat([[zero.zero_left, zero.zero_right]], n, axis=0),
                          ControlMode.POSITION_CURRENT, log_every=0)
    reach = max_position - zero.zero_offset
    floor = float(curve_position(min_force, ArmLoadModel(force_curve=curve)))
    if reach < floor:
        raise ArmTooSmallError(
            f"stall reached {reach:.1f} ticks past zero, below the {min_force} N position ({floor:.1f})")
    return RescaleMap(zero.zero_offset, max_position, max_force, curve)


def profile_tighten_release(target: float, rise: float = 60.0, fall: float = 60.0, dt: float = 0.001) -> np.ndarray:
    """Linear ramp 0 -> target over ``rise`` s and back to 0 over ``fall`` s."""
    if not (rise > 0 and fall > 0):
        raise ValueError("rise and fall must be positive")
    n_rise = int(round(rise / dt))
    n_fall = int(round(fall / dt))
    up = np.linspace(0.0, target, n_rise + 1)
    down = np.linspace(target, 0.0, n_fall + 1)[1:]
    return np.concatenate([up, down])


@dataclass
class StaircaseResult:
    levels: np.ndarray  # per-motor current reference, mA
    current: np.ndarray  # total absorbed current at the end of each step, mA
    force: np.ndarray  # N
    stalled: bool


def staircase_current(device: Device, step: float = 20.0, period: float = 2.0,
                      max_steps: int | None = None) -> StaircaseResult:
    """Raise the opposite-direction current reference by ``step`` every
    ``period`` seconds until the motors stall."""
    if not step > 0:
        raise ValueError("step must be positive")
    limit = device.gains.current_ref_limit
    if max_steps is None:
        max_steps = int(math.ceil(limit / step)) + 5
    n = int(round(period / device.dt))
    levels, currents, forces = [], [], []
    stalled = False
    for k in range(1, max_steps + 1):
        level = min(k * step, limit)
        if level >= limit:
            # the ceiling step is held until the motors stall
            device.run(np.full(10 * n, level), mode=ControlMode.CURRENT_ONLY, log_every=0, stop="stall",
                       hold=int(round(0.05 / device.dt)))
            stalled = device.last_steps < 10 * n
        else:
            device.run(np.full(n, level), mode=ControlMode.CURRENT_ONLY, log_every=n)
            stalled = device.plant.stalled
        levels.append(level)
        currents.append(abs(device.plant.left.current) + abs(device.plant.right.current))
        forces.append(device.plant.normal_force())
        if stalled or level >= limit:
            break
    return StaircaseResult(np.array(levels), np.array(currents), np.array(forces), stalled)


def loop_area(reference, force, n_grid: int = 512) -> float:
    """Area between the rising and falling branches of a force/reference loop.

    Both axes are normalized by their maxima so loops from a current
    reference and a position reference can be compared.
    """
    x = np.asarray(reference, dtype=float)
    y = np.asarray(force, dtype=float)
    peak = int(np.argmax(x))
    xs, ys = x / x[peak], y / max(y.max(), 1e-12)
    up_x, up_y = xs[: peak + 1], ys[: peak + 1]
    dn_x, dn_y = xs[peak:][::-1], ys[peak:][::-1]
    grid = np.linspace(0.0, 1.0, n_grid)
    up = np.interp(grid, np.maximum.accumulate(up_x), up_y)
    dn = np.interp(grid, np.maximum.accumulate(dn_x), dn_y)
    return float(np.trapezoid(np.abs(up - dn), grid))


@dataclass
class HysteresisLoop:
    mode: ControlMode
    reference: np.ndarray  # commanded ticks (position mode) or mA (current mode)
    force: np.ndarray  # N
    area: float


def hysteresis_loops(plant_cfg: PlantConfig | None = None, load: ArmLoadModel | None = None,
                     gains: CascadeGains | None = None, target_ticks: float = 800.0,
                     target_current: float = 500.0, rise: float = 60.0, fall: float = 60.0,
                     log_every: int = 10) -> dict[str, HysteresisLoop]:
    """Tighten-release loops in both control modes on identical fresh plants."""
    out = {}
    for mode, target in ((ControlMode.POSITION_CURRENT, target_ticks), (ControlMode.CURRENT_ONLY, target_current)):
        dev = Device(Plant(plant_cfg or PlantConfig(), load or ArmLoadModel()), gains, mode)
        pretension(dev)
        prof = profile_tighten_release(target, rise, fall, dev.dt)
        tr = dev.run(prof, mode=mode, log_every=log_every)
        ref = prof[::log_every][: len(tr)]
        out[mode.value] = HysteresisLoop(mode, ref, tr.force, loop_area(ref, tr.force))
    return out
