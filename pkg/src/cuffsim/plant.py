"""
Discrete-time surrogate of the two-motor belt device wrapped around a rigid
cylinder.

Each actuation unit is a geared DC motor driving one end of a non-elastic
belt. Turning the motors in opposite directions tightens the belt (normal
force on the cylinder); turning them in the same direction slides it
(tangential displacement). Positions are output-shaft encoder ticks,
currents are mA, forces are N.

The motor model is a first-order current lag with back-EMF and a
quasi-static mechanical balance (no rotor inertia):

    di/dt  = (pwm * i_free - k_e * v - i) / tau
    v      = (k_f * i + load - friction) / b     when unstuck, else 0

Friction grows with the load it resists, which produces the tighten/release
hysteresis seen when the belt is driven by a current reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

__all__ = [
    "PlantConfig",
    "ArmLoadModel",
    "MotorState",
    "BeltState",
    "Plant",
    "step_plant",
    "belt_force",
    "belt_force_checked",
    "curve_position",
    "invert_curve",
    "belt_displacement",
    "encoder_read",
    "decompose",
    "radius_gain",
]

# Eq. 1 coefficients (ticks per N^3, N^2, N)
REFERENCE_CURVE = (0.1138, -5.204, 89.22)


@dataclass(frozen=True)
class PlantConfig:
    """Motor, gearing and encoder constants shared by both actuation units."""

    gear_ratio: int = 64
    ticks_per_rev: int = 4096
    roller_diameter: float = 10.0  # mm
    dt: float = 0.001  # s
    current_limit: float = 500.0  # mA per motor
    motor_time_constant: float = 0.002  # s
    torque_constant: float = 25.0 * 1.06 * 5.0 / (64 * 500.0)  # mN*m/mA, 25 N at stall
    free_current: float = 1500.0  # mA drawn at full duty with the rotor locked
    back_emf: float = 0.3  # mA per tick/s
    damping: float = 0.0055  # N*s/tick
    coulomb_friction: float = 0.0  # N
    load_friction: float = 0.06  # fraction of the resisted load
    skin_stiffness: float = 0.002  # N/tick of belt slide
    velocity_epsilon: float = 1.0  # ticks/s
    stall_margin: float = 0.5  # mA below the limit still counted as stalled
    tighten_limit_ticks: float = 800.0
    tighten_limit_force: float = 17.0  # N

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.ticks_per_rev != 4096:
            raise ValueError("the encoder resolution is fixed at 4096 ticks per revolution")
        if self.current_limit < 0:
            raise ValueError("current_limit must be non-negative")
        for name in ("motor_time_constant", "damping", "roller_diameter", "gear_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def degrees_per_tick(self) -> float:
        return 360.0 / self.ticks_per_rev

    @property
    def force_per_current(self) -> float:
        """Belt force (N) produced per mA of motor current at the roller."""
        return self.torque_constant * self.gear_ratio / (0.5 * self.roller_diameter)

    @classmethod
    def first_prototype(cls, **kw) -> "PlantConfig":
        """Stronger drive of the earlier prototype: ~22 N at a 1000 mA total stall."""
        return cls(torque_constant=22.0 * 1.06 * 5.0 / (64 * 500.0), **kw)


def radius_gain(radius: float, spread: float = 0.05) -> float:
    """Per-fixture curve gain, linear in size across the 80-115 mm set."""
    return 1.0 + spread * (float(radius) - 97.5) / 17.5


@dataclass(frozen=True)
class ArmLoadModel:
    """Cylinder (or arm) the belt is wrapped around.

    ``force_curve`` holds the (c3, c2, c1) coefficients of the cubic that maps
    force to net tighten position; ``gain`` stretches the position axis to
    emulate different sizes, ``slack`` is how far the belt must be tightened
    from the plant origin before it touches the surface.
    """

    radius: float = 80.0
    force_curve: tuple = REFERENCE_CURVE
    pretension_force: float = 0.464
    pretension_sd: float = 0.1793
    gain: float = 1.0
    slack: float = 150.0
    max_force: float = 26.0

    def __post_init__(self):
        c3, c2, c1 = (float(c) for c in self.force_curve)
        object.__setattr__(self, "force_curve", (c3, c2, c1))
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if self.pretension_force < 0:
            raise ValueError("pretension_force must be non-negative")
        # derivative 3 c3 F^2 + 2 c2 F + c1 must stay positive on [0, max_force]
        grid = np.linspace(0.0, self.max_force, 2001)
        if (3 * c3 * grid**2 + 2 * c2 * grid + c1).min() <= 0:
            raise ValueError("force curve is not strictly increasing on [0, max_force]")

    @classmethod
    def for_radius(cls, radius: float, spread: float = 0.05, **kw) -> "ArmLoadModel":
        return cls(radius=radius, gain=radius_gain(radius, spread), **kw)

    def with_pretension(self, force: float) -> "ArmLoadModel":
        return replace(self, pretension_force=float(force))


@dataclass
class MotorState:
    position: float = 0.0  # ticks, continuous
    velocity: float = 0.0  # ticks/s
    current: float = 0.0  # mA
    pwm: float = 0.0
    stalled: bool = False


@dataclass(frozen=True)
class BeltState:
    net_tighten: float
    net_slide: float
    normal_force: float
    tangential_displacement: float


# ---------------------------------------------------------------------------
# compiled cores


@njit(cache=True)
def _cubic(F, c3, c2, c1):
    return ((c3 * F + c2) * F + c1) * F


@njit(cache=True)
def _invert(n, c3, c2, c1, gain, fmax):
    """Root of gain*f(F) = n on [0, fmax]; returns (F, saturated)."""
    target = n / gain
    if target <= 0.0:
        return 0.0, False
    top = _cubic(fmax, c3, c2, c1)
    if target >= top:
        return fmax, target > top
    lo = 0.0
    hi = fmax
    F = fmax * target / top
    for _ in range(200):
        r = _cubic(F, c3, c2, c1) - target
        if r > 0.0:
            hi = F
        else:
            lo = F
        d = (3.0 * c3 * F + 2.0 * c2) * F + c1
        Fn = F - r / d if d > 0.0 else 0.5 * (lo + hi)
        if Fn <= lo or Fn >= hi:
            Fn = 0.5 * (lo + hi)
        if abs(Fn - F) < 1e-14 * (1.0 + F):
            F = Fn
            break
        F = Fn
    return F, False


@njit(cache=True)
def _contact_force(net_tighten, lp):
    # lp: c3, c2, c1, gain, floor, fmax, slack
    d = net_tighten - lp[6]
    if d < 0.0:
        return 0.0
    F, _ = _invert(d, lp[0], lp[1], lp[2], lp[3], lp[5])
    return max(F, lp[4])


@njit(cache=True)
def _motor_step(pos, vel, cur, pwm, external, pp):
    # pp: dt, limit, tau, i_free, k_e, k_f, b, f0, mu, v_eps, margin
    dt = pp[0]
    limit = pp[1]
    tau = pp[2]
    ke = pp[4]
    kf = pp[5]
    b = pp[6]
    fr = pp[7] + pp[8] * abs(external)
    drive = pwm * pp[3]
    # regime 1: shaft stuck, no back-EMF
    i_new = drive + (cur - drive) * math.exp(-dt / tau)
    net = kf * i_new + external
    v = 0.0
    if abs(net) > fr:
        # regime 2: moving, v = (kf*i + external -+ fr)/b is linear in i, so the
        # back-EMF coupled lag is still first order and stepped exactly
        sgn = 1.0 if net > 0.0 else -1.0
        c = (external - sgn * fr) / b
        gain = 1.0 + ke * kf / b
        target = (drive - ke * c) / gain
        i_new = target + (cur - target) * math.exp(-dt * gain / tau)
        v = (kf * i_new + external - sgn * fr) / b
        if v * sgn < 0.0:
            v = 0.0
    cur = i_new
    if cur > limit:
        cur = limit
    elif cur < -limit:
        cur = -limit
    if cur != i_new:
        net = kf * cur + external
        if abs(net) <= fr:
            v = 0.0
        elif net > 0.0:
            v = (net - fr) / b
        else:
            v = (net + fr) / b
    pos = pos + v * dt
    stalled = abs(cur) >= limit - pp[10] and abs(v) < pp[9] and limit > 0.0
    return pos, v, cur, stalled


@njit(cache=True)
def _pair_step(s, pwm_l, pwm_r, pp, lp, skin):
    """Advance both motors one step. s = [pL, vL, iL, uL, pR, vR, iR, uR]."""
    tighten = 0.5 * (s[0] - s[4])
    slide = 0.5 * (s[0] + s[4])
    F = _contact_force(tighten, lp)
    shear = skin * slide
    pl, vl, il, stl = _motor_step(s[0], s[1], s[2], pwm_l, -F - shear, pp)
    pr, vr, ir, str_ = _motor_step(s[4], s[5], s[6], pwm_r, F - shear, pp)
    s[0] = pl
    s[1] = vl
    s[2] = il
    s[3] = pwm_l
    s[4] = pr
    s[5] = vr
    s[6] = ir
    s[7] = pwm_r
    return stl, str_


def _plant_params(cfg: PlantConfig) -> np.ndarray:
    return np.array(
        [
            cfg.dt,
            cfg.current_limit,
            cfg.motor_time_constant,
            cfg.free_current,
            cfg.back_emf,
            cfg.force_per_current,
            cfg.damping,
            cfg.coulomb_friction,
            cfg.load_friction,
            cfg.velocity_epsilon,
            cfg.stall_margin,
        ],
        dtype=np.float64,
    )


def _load_params(load: ArmLoadModel) -> np.ndarray:
    c3, c2, c1 = load.force_curve
    return np.array(
        [c3, c2, c1, load.gain, load.pretension_force, load.max_force, load.slack],
        dtype=np.float64,
    )


# ---------------------------------------------------------------------------
# public operations


def curve_position(force, load: ArmLoadModel = ArmLoadModel()):
    """Net tighten position (ticks) for a belt force, straight from the cubic."""
    c3, c2, c1 = load.force_curve
    F = np.asarray(force, dtype=float)
    return load.gain * ((c3 * F + c2) * F + c1) * F


def invert_curve(net_tighten: float, load: ArmLoadModel = ArmLoadModel()) -> tuple[float, bool]:
    """Bare inverse of the force curve (no pretension floor).

    Returns the force and whether the input lay past ``load.max_force``.
    """
    c3, c2, c1 = load.force_curve
    F, sat = _invert(float(max(net_tighten, 0.0)), c3, c2, c1, load.gain, load.max_force)
    return float(F), bool(sat)


def belt_force_checked(net_tighten: float, load: ArmLoadModel = ArmLoadModel()) -> tuple[float, bool]:
    """Normal force for a net tighten measured from the pre-tensioned zero.

    The force never drops below ``load.pretension_force``; tightening past the
    curve's top clamps to ``load.max_force`` and sets the saturation flag.
    """
    n = float(net_tighten)
    if not math.isfinite(n):
        raise ValueError("net_tighten must be finite")
    F, sat = invert_curve(n, load)
    return max(F, load.pretension_force), sat


def belt_force(net_tighten: float, load: ArmLoadModel = ArmLoadModel()) -> float:
    return belt_force_checked(net_tighten, load)[0]


def belt_displacement(net_slide, cfg: PlantConfig = PlantConfig()):
    """Tangential belt travel in mm; positive is rightward."""
    return np.asarray(net_slide, dtype=float) / cfg.ticks_per_rev * math.pi * cfg.roller_diameter


def encoder_read(state) -> int:
    """Quantize a position to whole ticks, truncating toward zero."""
    position = state.position if isinstance(state, MotorState) else state
    return int(math.trunc(position))


def decompose(p_left, p_right):
    """Split motor positions into (net_tighten, net_slide)."""
    return 0.5 * (p_left - p_right), 0.5 * (p_left + p_right)


def _validate_pwm(pwm) -> tuple[float, float]:
    if len(pwm) != 2:
        raise ValueError("expected one duty value per motor")
    out = []
    for u in pwm:
        u = float(u)
        if not math.isfinite(u):
            raise ValueError(f"non-finite pwm {u!r}")
        if abs(u) > 1.0:
            raise ValueError(f"pwm {u} outside [-1, 1]")
        out.append(u)
    return out[0], out[1]


def step_plant(
    state: tuple[MotorState, MotorState],
    pwm,
    load: ArmLoadModel = ArmLoadModel(),
    cfg: PlantConfig = PlantConfig(),
) -> tuple[MotorState, MotorState]:
    """Advance the motor pair by ``cfg.dt`` and return the new states.

    The inputs are left untouched. ``pwm`` is a (left, right) duty pair; the
    left motor tightens with positive motion, the right with negative.
    """
    ul, ur = _validate_pwm(pwm)
    left, right = state
    s = np.array(
        [left.position, left.velocity, left.current, left.pwm,
         right.position, right.velocity, right.current, right.pwm],
        dtype=np.float64,
    )
    stl, str_ = _pair_step(s, ul, ur, _plant_params(cfg), _load_params(load), cfg.skin_stiffness)
    return (
        MotorState(float(s[0]), float(s[1]), float(s[2]), float(s[3]), bool(stl)),
        MotorState(float(s[4]), float(s[5]), float(s[6]), float(s[7]), bool(str_)),
    )


@dataclass
class Plant:
    """A device on a cylinder: configuration plus the mutable motor pair."""

    cfg: PlantConfig = field(default_factory=PlantConfig)
    load: ArmLoadModel = field(default_factory=ArmLoadModel)
    left: MotorState = field(default_factory=MotorState)
    right: MotorState = field(default_factory=MotorState)

    def step(self, pwm) -> tuple[MotorState, MotorState]:
        self.left, self.right = step_plant((self.left, self.right), pwm, self.load, self.cfg)
        return self.left, self.right

    @property
    def stalled(self) -> bool:
        return self.left.stalled and self.right.stalled

    def normal_force(self) -> float:
        tighten, _ = decompose(self.left.position, self.right.position)
        return float(_contact_force(tighten, _load_params(self.load)))

    def belt(self) -> BeltState:
        tighten, slide = decompose(self.left.position, self.right.position)
        return BeltState(
            net_tighten=tighten,
            net_slide=slide,
            normal_force=self.normal_force(),
            tangential_displacement=float(belt_displacement(slide, self.cfg)),
        )

    def force_at(self, net_tighten) -> np.ndarray:
        """Ground-truth contact force for net tighten positions (plant origin)."""
        lp = _load_params(self.load)
        flat = np.atleast_1d(np.asarray(net_tighten, dtype=float))
        return np.array([_contact_force(x, lp) for x in flat]).reshape(np.shape(net_tighten))

    def encoders(self) -> tuple[int, int]:
        return encoder_read(self.left), encoder_read(self.right)

    def copy(self) -> "Plant":
        return Plant(self.cfg, self.load, replace(self.left), replace(self.right))
