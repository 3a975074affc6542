"""Synthetic rigid-scene simulator: the test oracle for the whole pipeline.

Each pixel is a fronto-sampled surface point at initial forward distance
d0(y, x); the camera translates along the optical axis with a piecewise
constant acceleration profile, so per-pixel distance is d(t) = d0 - x(t) in
closed form and both r = v/d and rdot = (a*d + v^2)/d^2 are analytically
available for every frame. Flow is synthesized directly in angular units
(rad/s) at the fixed pixel angles; there is no image rendering and no
upstream flow network, so the algorithm under test starts exactly at its
measurement model. A yaw-rate profile adds the rotational flow component that
the frontend's derotation removes (exact inverse pair by construction).

The IMU is simulated as a high-rate trace (default 250 Hz) with additive
noise and a constant bias, then block-mean resampled to the frame rate; the
per-frame measured values in each SimFrame come from that single code path so
in-memory runs and replayed datasets agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import resample_imu
from .frontend import FlowField
from .geometry import AngleGrid, CameraIntrinsics, build_angle_grid


@dataclass(frozen=True)
class TrajectorySpec:
    """1-D forward trajectory: initial speed plus piecewise-constant accelerations.

    segments: list of (duration_s, accel_mps2). An optional yaw profile (same
    shape) drives the rotational flow component; it defaults to none (straight
    motion).
    """

    v0: float
    segments: tuple = ((10.0, 0.0),)
    yaw_segments: tuple = ()

    def __post_init__(self):
        if not self.segments:
            raise ValueError("trajectory needs at least one segment")
        for dur, _ in self.segments:
            if dur <= 0:
                raise ValueError("segment durations must be positive")
        object.__setattr__(self, "segments", tuple((float(d), float(a)) for d, a in self.segments))
        object.__setattr__(
            self, "yaw_segments", tuple((float(d), float(w)) for d, w in self.yaw_segments)
        )

    @property
    def total_duration(self) -> float:
        return sum(d for d, _ in self.segments)

    def _knots(self):
        # cumulative (t_start, x_start, v_start, a) per segment
        knots = []
        t = x = 0.0
        v = self.v0
        for dur, a in self.segments:
            knots.append((t, x, v, a))
            x += v * dur + 0.5 * a * dur * dur
            v += a * dur
            t += dur
        return knots, t

    def state_at(self, t: float) -> tuple[float, float, float]:
        """(displacement, velocity, acceleration) at time t, closed form."""
        knots, total = self._knots()
        if t < 0 or t > total + 1e-9:
            raise ValueError(f"t={t} outside trajectory span [0, {total}]")
        for t0, x0, v0, a in reversed(knots):
            if t >= t0 - 1e-12:
                dt = t - t0
                return (x0 + v0 * dt + 0.5 * a * dt * dt, v0 + a * dt, a)
        raise AssertionError("unreachable")

    def yaw_rate_at(self, t: float) -> float:
        if not self.yaw_segments:
            return 0.0
        acc = 0.0
        for dur, w in self.yaw_segments:
            if t < acc + dur:
                return w
            acc += dur
        return self.yaw_segments[-1][1]

    def yaw_angle_at(self, t: float) -> float:
        """Integrated yaw angle at time t (holds the last rate past the end)."""
        if not self.yaw_segments:
            return 0.0
        angle = 0.0
        acc = 0.0
        for dur, w in self.yaw_segments:
            step = min(max(t - acc, 0.0), dur)
            angle += w * step
            acc += dur
        if t > acc:
            angle += self.yaw_segments[-1][1] * (t - acc)
        return angle

    def displacement_extremes(self, horizon_s: float) -> tuple[float, float]:
        """Exact min/max displacement over [0, horizon] (segment ends + interior vertices)."""
        _, total = self._knots()
        horizon = min(horizon_s, total)
        cands = [self.state_at(0.0)[0], self.state_at(horizon)[0]]
        t_acc = 0.0
        for dur, a in self.segments:
            t_end = min(t_acc + dur, horizon)
            if t_end > t_acc:
                cands.append(self.state_at(t_end)[0])
                _, v_seg, _ = self.state_at(t_acc)
                if a != 0.0:
                    t_vertex = t_acc - v_seg / a
                    if t_acc < t_vertex < t_end:
                        cands.append(self.state_at(t_vertex)[0])
            t_acc += dur
            if t_acc >= horizon:
                break
        return min(cands), max(cands)


@dataclass(frozen=True)
class NoiseSpec:
    """Sensor imperfection model. All sigmas >= 0; fixed seed => fixed realization."""

    flow_noise_sigma: float = 0.0  # rad/s, i.i.d. per pixel per component
    flow_direction_jitter: float = 0.0  # rad, random rotation of each flow vector
    accel_noise_sigma: float = 0.0  # m/s^2, per high-rate IMU sample
    accel_bias: float = 0.0  # m/s^2, constant per run
    gyro_noise_sigma: float = 0.0  # rad/s, per high-rate IMU sample
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("flow_noise_sigma", "flow_direction_jitter", "accel_noise_sigma", "gyro_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class ScenePlan:
    depth_map0: np.ndarray  # (H, W) initial forward distance, m
    trajectory: TrajectorySpec
    intrinsics: CameraIntrinsics
    fps: float = 30.0
    duration_s: float = 30.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    imu_rate_hz: float = 250.0

    def __post_init__(self):
        d0 = np.asarray(self.depth_map0, dtype=float)
        object.__setattr__(self, "depth_map0", d0)
        if d0.shape != (self.intrinsics.height_px, self.intrinsics.width_px):
            raise ValueError(
                f"depth_map0 shape {d0.shape} does not match intrinsics "
                f"({self.intrinsics.height_px}, {self.intrinsics.width_px})"
            )
        if not np.all(np.isfinite(d0)) or np.any(d0 <= 0):
            raise ValueError("all initial depths must be finite and > 0")
        if self.fps <= 0 or self.duration_s <= 0:
            raise ValueError("fps and duration_s must be positive")
        if self.imu_rate_hz < self.fps:
            raise ValueError("imu_rate_hz must be >= fps")
        if self.trajectory.total_duration + 1e-9 < self.duration_s:
            raise ValueError("trajectory segments shorter than requested duration")
        _, x_max = self.trajectory.displacement_extremes(self.duration_s)
        if float(d0.min()) - x_max <= 0:
            raise ValueError(
                f"camera would reach a surface: min depth {d0.min():.3f} m, "
                f"max displacement {x_max:.3f} m"
            )

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.fps))


@dataclass(frozen=True)
class SimFrame:
    """One simulated frame: measurements plus noise-free ground truth."""

    t: float
    flow: FlowField  # measured (noisy) instantaneous flow, rad/s
    accel_meas: float  # m/s^2, block-mean over the frame interval, noisy
    gyro_meas: float  # rad/s, same resampling, noisy
    truth_v: float
    truth_a: float
    truth_depth: np.ndarray  # (H, W) m, noise-free


def rotational_flow(gyro_yaw: float, grid: AngleGrid) -> FlowField:
    """Flow added by a pure yaw rotation: -gyro_yaw on the horizontal component.

    Constant across pixels (small-FOV rotational model); the frontend's
    derotate() adds the same field back, making the pair exactly inverse.
    """
    if not math.isfinite(gyro_yaw):
        raise ValueError("gyro_yaw must be finite")
    h, w = grid.shape
    return FlowField(u=np.full((h, w), -gyro_yaw), w=np.zeros((h, w)), t=0.0)


def simulate_imu(plan: ScenePlan) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """High-rate IMU trace (t_s, accel, gyro_yaw) with noise and bias applied.

    Integrating sensor model: the sample at t_k reports the mean over its own
    sampling interval (t_{k-1}, t_k], i.e. the delta-velocity (delta-angle)
    divided by the sampling period. Sampled means are exact integrals, so any
    later block average onto the frame clock stays an exact integral too;
    point-sampling instead would smear every acceleration step across the
    sample that lands on it.
    """
    n = int(round(plan.duration_s * plan.imu_rate_hz))
    t = np.arange(n + 1) / plan.imu_rate_hz
    v = np.array([plan.trajectory.state_at(tk)[1] for tk in t])
    yaw = np.array([plan.trajectory.yaw_angle_at(tk) for tk in t])
    accel = np.empty(n + 1)
    gyro = np.empty(n + 1)
    accel[0] = plan.trajectory.state_at(0.0)[2]
    gyro[0] = plan.trajectory.yaw_rate_at(0.0)
    accel[1:] = np.diff(v) * plan.imu_rate_hz
    gyro[1:] = np.diff(yaw) * plan.imu_rate_hz
    ns = plan.noise
    rng = np.random.default_rng([ns.rng_seed, 1000003])
    accel = accel + ns.accel_bias + rng.normal(0.0, ns.accel_noise_sigma, accel.shape)
    gyro = gyro + rng.normal(0.0, ns.gyro_noise_sigma, gyro.shape)
    return t, accel, gyro


def _noisy_flow(u, w, noise: NoiseSpec, frame_idx: int):
    if noise.flow_direction_jitter > 0:
        rng = np.random.default_rng([noise.rng_seed, frame_idx, 1])
        th = rng.normal(0.0, noise.flow_direction_jitter, u.shape)
        c, s = np.cos(th), np.sin(th)
        u, w = u * c - w * s, u * s + w * c
    if noise.flow_noise_sigma > 0:
        rng = np.random.default_rng([noise.rng_seed, frame_idx, 2])
        u = u + rng.normal(0.0, noise.flow_noise_sigma, u.shape)
        w = w + rng.normal(0.0, noise.flow_noise_sigma, w.shape)
    return u, w


def simulate(plan: ScenePlan):
    """Yield SimFrames at 1/fps spacing. Deterministic per plan (seed included).

    Noise streams are seeded per frame with counter-based keys, so a frame's
    content does not depend on how many frames were generated before it.
    """
    grid = build_angle_grid(plan.intrinsics)
    imu_t, imu_a, imu_g = simulate_imu(plan)
    frame_t = np.arange(plan.n_frames) / plan.fps
    accel_frames, gyro_frames, _ = resample_imu(imu_t, imu_a, imu_g, plan.fps, plan.n_frames)
    for i in range(plan.n_frames):
        t = float(frame_t[i])
        x, v, a = plan.trajectory.state_at(t)
        depth = plan.depth_map0 - x
        inv_d = v / depth
        u = -inv_d * grid.cs_h
        w = -inv_d * grid.cs_v
        yaw = plan.trajectory.yaw_rate_at(t)
        if yaw != 0.0:
            u = u - yaw  # rotational component, model shared with derotate()
        u, w = _noisy_flow(u, w, plan.noise, i)
        yield SimFrame(
            t=t,
            flow=FlowField(u=u, w=w, t=t),
            accel_meas=float(accel_frames[i]),
            gyro_meas=float(gyro_frames[i]),
            truth_v=v,
            truth_a=a,
            truth_depth=depth,
        )


def simulate_list(plan: ScenePlan) -> list[SimFrame]:
    """Materialized simulate(); only sensible for small scenes."""
    return list(simulate(plan))
