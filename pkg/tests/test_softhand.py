import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cuffsim.softhand import (
    GraspObject,
    GraspSignal,
    SignalError,
    SoftHandConfig,
    break_check,
    contact_position,
    grasp_force_estimate,
    playback,
    record,
    simulate_grasp,
)

CFG = SoftHandConfig()


def test_object_validation():
    with pytest.raises(ValueError):
        GraspObject(0.0, 0.4, "rigid")
    with pytest.raises(ValueError):
        GraspObject(40.0, 0.4, "glass")
    assert GraspObject.rigid(40).stiffness > 10 * GraspObject.soft(40).stiffness


def test_free_closure_reaches_command():
    sig = simulate_grasp(GraspObject.empty(), CFG.p_SHmax, duration=2.0)
    p, rc = sig.final
    assert p == pytest.approx(CFG.p_SHmax, abs=1.0)
    assert rc < CFG.rc_noise_bound


def test_command_beyond_range_rejected():
    with pytest.raises(ValueError):
        simulate_grasp(GraspObject.empty(), CFG.p_SHmax + 1)


def test_rigid_60_residual_increases_with_command():
    finals = [simulate_grasp(GraspObject.rigid(60), c).final[1] for c in (15000, 16500, 18000)]
    assert finals[0] < finals[1] < finals[2]


def test_larger_object_contacts_earlier():
    assert contact_position(80.0) < contact_position(60.0) < contact_position(40.0)
    p80 = simulate_grasp(GraspObject.rigid(80), 18000).final[0]
    p40 = simulate_grasp(GraspObject.rigid(40), 18000).final[0]
    assert p80 < p40


def test_signal_invariants():
    for obj in (GraspObject.empty(), GraspObject.rigid(60), GraspObject.soft(80)):
        sig = simulate_grasp(obj, 18000)
        assert len(sig.p_SHmeas) == len(sig.rc_SHmeas) == 2000
        assert np.all(np.diff(sig.p_SHmeas) >= -1e-9)
        assert np.all(sig.rc_SHmeas >= 0)


def test_residual_nondecreasing_in_stiffness():
    soft = simulate_grasp(GraspObject.soft(60), 18000, cfg=SoftHandConfig(rc_noise=0.0)).final[1]
    rigid = simulate_grasp(GraspObject.rigid(60), 18000, cfg=SoftHandConfig(rc_noise=0.0)).final[1]
    assert soft <= rigid


def test_repetitions_seeded():
    a = [simulate_grasp(GraspObject.rigid(40), 18000, seed=3) for _ in range(10)]
    assert all(s.equals(a[0]) for s in a)
    b = simulate_grasp(GraspObject.rigid(40), 18000, seed=4)
    assert not b.equals(a[0])
    assert np.array_equal(a[0].p_SHmeas, b.p_SHmeas)
    assert np.max(np.abs(a[0].rc_SHmeas - b.rc_SHmeas)) <= 2 * CFG.rc_noise_bound


def test_force_estimate_examples():
    assert not grasp_force_estimate(np.zeros(10)).any()
    assert grasp_force_estimate(np.array([875.0]), 0.04)[0] == pytest.approx(35.0)


def test_break_examples():
    assert not break_check([0.0, 20.0, 34.9, 30.0])
    res = break_check([0.0, 20.0, 35.0, 36.0])
    assert res.broken and res.index == 2 and res.time == pytest.approx(0.002)
    assert not break_check([])


@given(st.lists(st.floats(0.0, 60.0), max_size=200))
def test_break_first_crossing(force):
    res = break_check(force)
    f = np.asarray(force)
    if res.broken:
        assert f[res.index] >= 35.0
        assert np.all(f[: res.index] < 35.0)
    else:
        assert np.all(f < 35.0)


def test_record_playback(tmp_path):
    sig = simulate_grasp(GraspObject.rigid(60), 16500, duration=0.2)
    path = tmp_path / "g.csv"
    record(sig, path)
    back = playback(path, 1000.0)
    assert back.equals(sig)


def test_playback_rate_mismatch(tmp_path):
    sig = simulate_grasp(GraspObject.empty(), 1000, duration=0.05)
    path = tmp_path / "g.csv"
    record(sig, path)
    with pytest.raises(SignalError, match="Hz"):
        playback(path, 500.0)


def test_playback_truncated(tmp_path):
    sig = GraspSignal(np.arange(10.0), np.zeros(10))
    path = tmp_path / "g.csv"
    record(sig, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3] + [lines[-3].rsplit(",", 1)[0]]) + "\n")
    with pytest.raises(SignalError, match="sample 7"):
        playback(path)
    path.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(SignalError, match="sample 7"):
        playback(path)
