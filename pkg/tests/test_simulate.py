"""Simulator oracles: closed-form trajectory, flow law, IMU model, noise."""

import math

import numpy as np
import pytest

from flowvel.frontend import derotate
from flowvel.geometry import CameraIntrinsics, build_angle_grid
from flowvel.simulate import (
    NoiseSpec,
    ScenePlan,
    TrajectorySpec,
    rotational_flow,
    simulate,
    simulate_imu,
    simulate_list,
)

INTR = CameraIntrinsics(width_px=4, height_px=2, hfov_rad=math.pi / 2,
                        vfov_rad=math.pi / 2)
GRID = build_angle_grid(INTR)


def make_plan(v0=1.0, segments=((10.0, 0.0),), d0=10.0, duration=2.0,
              noise=NoiseSpec(), yaw=(), fps=30.0, intr=INTR):
    depth = np.full((intr.height_px, intr.width_px), float(d0))
    traj = TrajectorySpec(v0=v0, segments=segments, yaw_segments=yaw)
    return ScenePlan(depth_map0=depth, trajectory=traj, intrinsics=intr,
                     fps=fps, duration_s=duration, noise=noise)


def test_constant_velocity_flow_law():
    # v=1, d0=10: at t=2 the depth is 8 m and the flow at the atan(3/4)
    # pixel is -(1/8)(12/25) = -0.06 exactly
    frames = simulate_list(make_plan(duration=3.0))
    fr = frames[60]
    assert fr.t == 2.0
    np.testing.assert_allclose(fr.truth_depth, 8.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(fr.flow.u, -GRID.cs_h / 8.0, rtol=1e-14, atol=0)
    np.testing.assert_allclose(fr.flow.w, -GRID.cs_v / 8.0, rtol=1e-14, atol=0)
    assert fr.flow.u[0, 3] == pytest.approx(-0.06, abs=1e-15)
    assert fr.truth_v == 1.0
    assert fr.truth_a == 0.0


def test_zero_motion_emits_zero_flow():
    for fr in simulate(make_plan(v0=0.0)):
        assert np.all(fr.flow.u == 0.0)
        assert np.all(fr.flow.w == 0.0)
        assert fr.accel_meas == 0.0
        assert fr.truth_v == 0.0


def test_scaled_scene_has_identical_flow():
    # multiplying depths, v0 and accelerations by k leaves every flow field
    # unchanged and scales the measured acceleration by k
    k = 10.0
    segs = ((2.0, -0.5), (2.0, 0.5))
    a = simulate_list(make_plan(v0=1.0, segments=segs, d0=10.0))
    b = simulate_list(make_plan(v0=k, segments=tuple((d, k * acc) for d, acc in segs),
                                d0=k * 10.0))
    for fa, fb in zip(a, b):
        np.testing.assert_allclose(fb.flow.u, fa.flow.u, rtol=1e-12, atol=1e-18)
        np.testing.assert_allclose(fb.flow.w, fa.flow.w, rtol=1e-12, atol=1e-18)
        assert fb.accel_meas == pytest.approx(k * fa.accel_meas, rel=1e-12, abs=1e-15)
        assert fb.truth_v == pytest.approx(k * fa.truth_v, rel=1e-12)


NOISY = NoiseSpec(flow_noise_sigma=0.003, flow_direction_jitter=0.01,
                  accel_noise_sigma=0.05, accel_bias=0.01,
                  gyro_noise_sigma=0.001, rng_seed=42)


def test_noisy_simulation_is_deterministic():
    a = simulate_list(make_plan(noise=NOISY))
    b = simulate_list(make_plan(noise=NOISY))
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.flow.u, fb.flow.u)
        assert np.array_equal(fa.flow.w, fb.flow.w)
        assert fa.accel_meas == fb.accel_meas
        assert fa.gyro_meas == fb.gyro_meas


def test_noise_streams_are_frame_keyed():
    # a frame's noise realization does not depend on the run length
    short = simulate_list(make_plan(duration=1.0, noise=NOISY))
    long = simulate_list(make_plan(duration=2.0, noise=NOISY))
    for fa, fb in zip(short, long):
        assert np.array_equal(fa.flow.u, fb.flow.u)
        assert np.array_equal(fa.flow.w, fb.flow.w)


def test_direction_jitter_preserves_magnitude():
    clean = simulate_list(make_plan())
    jit = simulate_list(make_plan(noise=NoiseSpec(flow_direction_jitter=0.05, rng_seed=3)))
    for fc, fj in zip(clean, jit):
        np.testing.assert_allclose(np.hypot(fj.flow.u, fj.flow.w),
                                   np.hypot(fc.flow.u, fc.flow.w),
                                   rtol=1e-12, atol=1e-18)


def test_collision_is_rejected_at_plan_time():
    with pytest.raises(ValueError, match="reach a surface"):
        make_plan(v0=1.0, d0=2.0, duration=3.0, segments=((5.0, 0.0),))


def test_plan_validation():
    with pytest.raises(ValueError, match="depths"):
        plan = make_plan()
        ScenePlan(depth_map0=np.zeros((2, 4)), trajectory=plan.trajectory,
                  intrinsics=INTR, duration_s=1.0)
    with pytest.raises(ValueError, match="shorter"):
        make_plan(segments=((1.0, 0.0),), duration=2.0)
    with pytest.raises(ValueError, match="imu_rate_hz"):
        ScenePlan(depth_map0=np.full((2, 4), 10.0),
                  trajectory=TrajectorySpec(v0=0.0), intrinsics=INTR,
                  duration_s=1.0, imu_rate_hz=10.0, fps=30.0)


def test_trajectory_closed_form():
    traj = TrajectorySpec(v0=1.0, segments=((4.0, -0.5), (4.0, 0.5)))
    x, v, a = traj.state_at(2.0)
    assert (x, v, a) == (1.0, 0.0, -0.5)
    x, v, a = traj.state_at(4.0)
    assert x == pytest.approx(0.0, abs=1e-12)
    assert v == pytest.approx(-1.0, abs=1e-12)
    assert a == 0.5  # boundary instant belongs to the segment it starts
    x, v, _ = traj.state_at(8.0)
    assert x == pytest.approx(0.0, abs=1e-12)
    assert v == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        traj.state_at(9.0)
    with pytest.raises(ValueError):
        traj.state_at(-0.1)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        TrajectorySpec(v0=1.0, segments=())
    with pytest.raises(ValueError):
        TrajectorySpec(v0=1.0, segments=((0.0, 1.0),))


def test_yaw_angle_integration():
    traj = TrajectorySpec(v0=0.0, segments=((4.0, 0.0),),
                          yaw_segments=((1.0, 0.2), (1.0, -0.1)))
    assert traj.yaw_angle_at(0.5) == pytest.approx(0.1)
    assert traj.yaw_angle_at(1.0) == pytest.approx(0.2)
    assert traj.yaw_angle_at(2.0) == pytest.approx(0.1)
    # last rate holds past the listed profile
    assert traj.yaw_angle_at(3.0) == pytest.approx(0.0)
    assert traj.yaw_rate_at(2.5) == -0.1


def test_pure_yaw_flow_and_derotation():
    plan = make_plan(v0=0.0, duration=1.0, yaw=((2.0, 0.3),))
    for fr in simulate(plan):
        np.testing.assert_allclose(fr.flow.u, -0.3, rtol=0, atol=1e-12)
        np.testing.assert_allclose(fr.flow.w, 0.0, rtol=0, atol=1e-18)
        assert fr.gyro_meas == pytest.approx(0.3, abs=1e-12)
        undone = derotate(fr.flow, fr.gyro_meas, GRID)
        np.testing.assert_allclose(undone.u, 0.0, rtol=0, atol=1e-12)


def test_rotational_flow_helper_matches_simulator():
    f = rotational_flow(0.3, GRID)
    assert np.all(f.u == -0.3)
    assert np.all(f.w == 0.0)
    with pytest.raises(ValueError):
        rotational_flow(math.inf, GRID)


def test_integrating_imu_reconstructs_velocity_exactly():
    # each sample is the mean over its own interval, so the cumulative sum
    # recovers v(t_k) to rounding error even across acceleration steps
    plan = make_plan(v0=1.0, segments=((1.0, -0.5), (1.0, 0.5)), duration=2.0)
    t, accel, gyro = simulate_imu(plan)
    rate = plan.imu_rate_hz
    v_rec = plan.trajectory.v0 + np.concatenate(([0.0], np.cumsum(accel[1:]) / rate))
    v_true = np.array([plan.trajectory.state_at(tk)[1] for tk in t])
    np.testing.assert_allclose(v_rec, v_true, rtol=0, atol=1e-12)
    assert np.all(gyro == 0.0)


def test_frame_accel_is_exact_block_mean_across_flip():
    # flip at t=1.0 lands exactly on a frame edge: both neighbouring frames
    # see their own segment's acceleration, not a smeared mixture
    plan = make_plan(v0=1.0, segments=((1.0, -0.5), (1.0, 0.5)), duration=2.0)
    frames = simulate_list(plan)
    assert frames[30].t == 1.0
    assert frames[30].accel_meas == pytest.approx(-0.5, abs=1e-12)
    assert frames[31].accel_meas == pytest.approx(0.5, abs=1e-12)
    assert frames[29].accel_meas == pytest.approx(-0.5, abs=1e-12)


def test_imu_bias_and_noise_statistics():
    ns = NoiseSpec(accel_noise_sigma=0.05, accel_bias=0.01, rng_seed=11)
    plan = make_plan(v0=0.0, duration=8.0, noise=ns)
    _, accel, _ = simulate_imu(plan)
    n = accel.size
    assert np.mean(accel) == pytest.approx(0.01, abs=4 * 0.05 / math.sqrt(n))
    assert np.std(accel) == pytest.approx(0.05, rel=0.1)


def test_truth_depth_tracks_displacement():
    plan = make_plan(v0=1.0, segments=((4.0, -0.5),), duration=2.0)
    for fr in simulate(plan):
        x, _, _ = plan.trajectory.state_at(fr.t)
        np.testing.assert_allclose(fr.truth_depth, 10.0 - x, rtol=0, atol=1e-12)


def test_simulate_list_matches_generator():
    plan = make_plan(noise=NOISY, duration=1.0)
    a = simulate_list(plan)
    b = list(simulate(plan))
    assert len(a) == len(b) == 30
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.flow.u, fb.flow.u)
        assert fa.t == fb.t
