import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cuffsim.plant import (
    ArmLoadModel,
    MotorState,
    Plant,
    PlantConfig,
    belt_displacement,
    belt_force,
    belt_force_checked,
    curve_position,
    decompose,
    encoder_read,
    invert_curve,
    radius_gain,
    step_plant,
)

C3, C2, C1 = 0.1138, -5.204, 89.22


def f_eval(F):
    # direct evaluation, independent of the package
    return C3 * F**3 + C2 * F**2 + C1 * F


def test_config_resolution():
    cfg = PlantConfig()
    assert cfg.gear_ratio == 64
    assert cfg.ticks_per_rev == 4096
    assert cfg.degrees_per_tick == pytest.approx(0.0879, abs=5e-5)
    with pytest.raises(ValueError):
        PlantConfig(ticks_per_rev=2048)
    with pytest.raises(ValueError):
        PlantConfig(dt=0.0)


def test_curve_strictly_increasing_is_checked():
    ArmLoadModel()  # reference coefficients pass
    with pytest.raises(ValueError):
        ArmLoadModel(force_curve=(0.1138, -8.0, 89.22))


def test_belt_force_examples():
    assert belt_force(0.0) == pytest.approx(0.464)
    assert f_eval(9.0) == pytest.approx(464.4, abs=0.05)
    assert invert_curve(f_eval(9.0))[0] == pytest.approx(9.0, abs=1e-9)
    assert f_eval(25.0) == pytest.approx(756.1, abs=0.05)
    assert belt_force(f_eval(25.0)) == pytest.approx(25.0, abs=1e-9)


def test_saturation_flag():
    F, sat = belt_force_checked(f_eval(26.0) + 50)
    assert sat and F == 26.0
    F, sat = belt_force_checked(f_eval(24.0))
    assert not sat


@pytest.mark.parametrize("F", np.linspace(0.0, 25.0, 251))
def test_round_trip_grid(F):
    assert abs(invert_curve(f_eval(F))[0] - F) < 1e-6
    floor = ArmLoadModel().pretension_force
    expected = max(F, floor)
    assert abs(belt_force(f_eval(F)) - expected) < 1e-6


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_belt_force_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert belt_force(lo) <= belt_force(hi)


def test_curve_position_inverse():
    load = ArmLoadModel(gain=1.05)
    for F in (1.0, 7.5, 20.0):
        assert invert_curve(curve_position(F, load), load)[0] == pytest.approx(F, abs=1e-9)


def test_radius_gain_spread():
    assert radius_gain(80.0) == pytest.approx(0.95)
    assert radius_gain(115.0) == pytest.approx(1.05)
    assert ArmLoadModel.for_radius(80.0).gain == pytest.approx(0.95)


def test_belt_displacement_examples():
    assert belt_displacement(0) == 0
    assert belt_displacement(4096) == pytest.approx(math.pi * 10)
    assert belt_displacement(-2334) == pytest.approx(-17.91, abs=0.01)


@pytest.mark.parametrize("pos, ticks", [(100.7, 100), (0.0, 0), (-3.2, -3)])
def test_encoder_truncates(pos, ticks):
    assert encoder_read(MotorState(position=pos)) == ticks
    assert encoder_read(pos) == ticks


def test_null_input_keeps_state():
    zero = (MotorState(), MotorState())
    left, right = step_plant(zero, (0.0, 0.0))
    assert (left.position, left.velocity, left.current) == (0.0, 0.0, 0.0)
    assert (right.position, right.velocity, right.current) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("pwm", [(float("nan"), 0.0), (0.0, float("inf")), (1.5, 0.0), (0.1,)])
def test_bad_pwm_rejected(pwm):
    with pytest.raises(ValueError):
        step_plant((MotorState(), MotorState()), pwm)


def test_tighten_to_stall_monotone_current():
    plant = Plant()
    currents = []
    for _ in range(3000):
        plant.step((0.6, -0.6))
        currents.append(plant.left.current)
    i = np.array(currents)
    assert np.all(np.diff(i) >= -1e-9)
    assert i[-1] == pytest.approx(plant.cfg.current_limit)
    assert plant.stalled
    assert abs(plant.left.velocity) < plant.cfg.velocity_epsilon


def test_first_order_step_response():
    # free motion: the current lag settles to the back-EMF balance
    cfg = PlantConfig(load_friction=0.0, skin_stiffness=0.0)
    load = ArmLoadModel(slack=1e9)
    state = (MotorState(), MotorState())
    u = 0.05
    for _ in range(200):
        state = step_plant(state, (u, u), load, cfg)
    kf = cfg.force_per_current
    g = 1.0 + cfg.back_emf * kf / cfg.damping
    expected = u * cfg.free_current / g
    assert state[0].current == pytest.approx(expected, rel=1e-6)


def test_same_direction_keeps_normal_force():
    plant = Plant()
    for _ in range(500):
        plant.step((0.3, 0.3))
    belt = plant.belt()
    assert belt.net_tighten == pytest.approx(0.0, abs=1e-9)
    assert belt.normal_force == 0.0 or belt.normal_force == pytest.approx(plant.load.pretension_force)
    assert belt.tangential_displacement > 0


def test_decomposition_orthogonality():
    t, s = decompose(120.0, -80.0)
    assert (t, s) == (100.0, 20.0)
    t2, s2 = decompose(120.0 + 7, -80.0 + 7)
    assert t2 == t and s2 == s + 7
    t3, s3 = decompose(120.0 + 7, -80.0 - 7)
    assert s3 == s and t3 == t + 7


def test_deterministic():
    a, b = Plant(), Plant()
    for k in range(300):
        u = 0.4 * math.sin(k / 30)
        a.step((u, -u))
        b.step((u, -u))
    assert a.left == b.left and a.right == b.right


def test_normal_force_floor_and_nonnegative():
    plant = Plant()
    nt = np.linspace(-200, 1200, 200)
    f = plant.force_at(nt)
    assert np.all(f >= 0)
    contact = nt >= plant.load.slack
    assert np.all(f[contact] >= plant.load.pretension_force)
