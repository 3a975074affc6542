"""Run configuration: one flat key=value namespace covering scene, noise and
estimator settings, with builders for the simulator plan and estimator config.

The file format is plain ``key=value`` lines (same parser as the dataset
manifest). Keys are dotted (scene.*, noise.*, estimator.*) so a config file
and a ``--set key=value`` override use identical spellings, and a round trip
through text reproduces the config exactly (floats serialized via repr).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .dataset import read_manifest, write_manifest
from .estimator import ButterworthSpec, DerivativeConfig, EstimatorConfig
from .frontend import FLOW_COMBINE_INSTANTANEOUS, StaggerConfig
from .geometry import CameraIntrinsics
from .simulate import NoiseSpec, ScenePlan, TrajectorySpec

DEPTH_PROFILE_LINEAR_X = "linear_x"  # depth ramps left to right across columns
DEPTH_PROFILE_CONSTANT = "constant"  # frontoparallel wall at depth_min

# the standard test trajectory: alternating +-0.5 m/s^2, 4 s per leg
STANDARD_SEGMENTS = ";".join(["4:-0.5", "4:0.5"] * 4)


def _k(key: str, default):
    return field(default=default, metadata={"key": key})


def format_segments(segments) -> str:
    """((dur, val), ...) -> 'dur:val;dur:val'. Empty tuple -> ''."""
    return ";".join(f"{repr(float(d))}:{repr(float(a))}" for d, a in segments)


def parse_segments(text: str) -> tuple:
    """'4:-0.5;4:0.5' -> ((4.0, -0.5), (4.0, 0.5)). '' -> ()."""
    text = text.strip()
    if not text:
        return ()
    out = []
    for part in text.split(";"):
        dur, sep, val = part.partition(":")
        if not sep:
            raise ValueError(f"bad segment {part!r}, expected duration:value")
        out.append((float(dur), float(val)))
    return tuple(out)


@dataclass
class RunConfig:
    """Flat, serializable description of one simulate/estimate/evaluate run.

    Defaults reproduce the standard test scene: 240x180 @ 60x45 deg, 30 fps,
    30 s, depth ramp 2..10 m across the image, 1 m/s initial speed with
    alternating +-0.5 m/s^2 legs, noise off.
    """

    # scene
    width_px: int = _k("scene.width_px", 240)
    height_px: int = _k("scene.height_px", 180)
    hfov_deg: float = _k("scene.hfov_deg", 60.0)
    vfov_deg: float = _k("scene.vfov_deg", 45.0)
    fps: float = _k("scene.fps", 30.0)
    duration_s: float = _k("scene.duration_s", 30.0)
    imu_rate_hz: float = _k("scene.imu_rate_hz", 250.0)
    v0_mps: float = _k("scene.v0_mps", 1.0)
    segments: str = _k("scene.segments", STANDARD_SEGMENTS)
    yaw_segments: str = _k("scene.yaw_segments", "")
    depth_profile: str = _k("scene.depth_profile", DEPTH_PROFILE_LINEAR_X)
    depth_min_m: float = _k("scene.depth_min_m", 2.0)
    depth_max_m: float = _k("scene.depth_max_m", 10.0)
    # noise
    flow_sigma: float = _k("noise.flow_sigma", 0.0)
    flow_direction_jitter: float = _k("noise.flow_direction_jitter", 0.0)
    accel_sigma: float = _k("noise.accel_sigma", 0.0)
    accel_bias: float = _k("noise.accel_bias", 0.0)
    gyro_sigma: float = _k("noise.gyro_sigma", 0.0)
    seed: int = _k("noise.seed", 0)
    # estimator
    stagger_frames: int = _k("estimator.stagger_frames", 6)
    flow_combine: str = _k("estimator.flow_combine", FLOW_COMBINE_INSTANTANEOUS)
    derivative_frames: int = _k("estimator.derivative_frames", 5)
    cutoff_fraction: float = _k("estimator.cutoff_fraction", 0.04)
    smoothing_cutoff_fraction: float = _k("estimator.smoothing_cutoff_fraction", 0.025)
    n_fields: int = _k("estimator.n_fields", 90)
    field_deg: float = _k("estimator.field_deg", 5.0)
    center_mask_deg: float = _k("estimator.center_mask_deg", 3.0)
    eps_denom: float = _k("estimator.eps_denom", 1e-4)
    align_statistics: bool = _k("estimator.align_statistics", True)
    second_moment_mode: str = _k("estimator.second_moment_mode", "pooled")
    smoothing: str = _k("estimator.smoothing", "complementary")
    gate_rel: float = _k("estimator.gate_rel", 0.75)

    # -- serialization ------------------------------------------------------

    @classmethod
    def _key_map(cls) -> dict:
        return {f.metadata["key"]: f for f in fields(cls)}

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            out[f.metadata["key"]] = str(val)
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        km = cls._key_map()
        unknown = sorted(set(flat) - set(km))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in flat.items():
            f = km[key]
            kwargs[f.name] = _coerce(raw, f.type, key)
        return cls(**kwargs)

    def with_overrides(self, pairs) -> "RunConfig":
        """Apply 'key=value' override strings on top of this config."""
        flat = self.to_flat()
        for pair in pairs:
            key, sep, val = pair.partition("=")
            if not sep:
                raise ValueError(f"override {pair!r} is not key=value")
            key = key.strip()
            if key not in flat:
                raise ValueError(f"unknown config key {key!r}")
            flat[key] = val.strip()
        return RunConfig.from_flat(flat)

    def save(self, path: str) -> None:
        write_manifest(path, self.to_flat())

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        return cls.from_flat(read_manifest(path))

    # -- builders -----------------------------------------------------------

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            width_px=self.width_px,
            height_px=self.height_px,
            hfov_rad=math.radians(self.hfov_deg),
            vfov_rad=math.radians(self.vfov_deg),
        )

    def depth_map0(self) -> np.ndarray:
        h, w = self.height_px, self.width_px
        if self.depth_profile == DEPTH_PROFILE_LINEAR_X:
            row = np.linspace(self.depth_min_m, self.depth_max_m, w)
            return np.tile(row, (h, 1))
        if self.depth_profile == DEPTH_PROFILE_CONSTANT:
            return np.full((h, w), self.depth_min_m)
        raise ValueError(f"unknown depth_profile {self.depth_profile!r}")

    def plan(self) -> ScenePlan:
        return ScenePlan(
            depth_map0=self.depth_map0(),
            trajectory=TrajectorySpec(
                v0=self.v0_mps,
                segments=parse_segments(self.segments),
                yaw_segments=parse_segments(self.yaw_segments),
            ),
            intrinsics=self.intrinsics(),
            fps=self.fps,
            duration_s=self.duration_s,
            noise=NoiseSpec(
                flow_noise_sigma=self.flow_sigma,
                flow_direction_jitter=self.flow_direction_jitter,
                accel_noise_sigma=self.accel_sigma,
                accel_bias=self.accel_bias,
                gyro_noise_sigma=self.gyro_sigma,
                rng_seed=self.seed,
            ),
            imu_rate_hz=self.imu_rate_hz,
        )

    def estimator_config(self, fps: float | None = None, **overrides) -> EstimatorConfig:
        """Estimator settings; pass fps to follow a replayed dataset's clock
        instead of the configured scene's."""
        spec = ButterworthSpec(cutoff_fraction_of_nyquist=self.cutoff_fraction)
        kwargs = dict(
            stagger=StaggerConfig(
                flow_stagger_frames=self.stagger_frames,
                fps=self.fps if fps is None else fps,
                combine=self.flow_combine,
            ),
            derivative=DerivativeConfig(
                derivative_stagger_frames=self.derivative_frames, prefilter=spec
            ),
            output_filter=ButterworthSpec(
                cutoff_fraction_of_nyquist=self.smoothing_cutoff_fraction
            ),
            n_fields=self.n_fields,
            field_deg=self.field_deg,
            center_mask_deg=self.center_mask_deg,
            eps_denom=self.eps_denom,
            align_statistics=self.align_statistics,
            second_moment_mode=self.second_moment_mode,
            smoothing=self.smoothing,
            gate_rel=self.gate_rel,
        )
        kwargs.update(overrides)
        return EstimatorConfig(**kwargs)


def _coerce(raw: str, typ, key: str):
    name = typ if isinstance(typ, str) else typ.__name__
    raw = raw.strip()
    try:
        if name == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"{key}: expected true/false, got {raw!r}")
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise ValueError(f"{key}: cannot parse {raw!r} as {name}") from e


def standard_scene(noisy: bool = False, seed: int = 7) -> RunConfig:
    """The reference evaluation scene, optionally with the standard sensor
    noise (flow sigma = 20% of the median noiseless flow magnitude, accel
    sigma 0.05 m/s^2 plus 0.01 m/s^2 bias)."""
    cfg = RunConfig()
    if noisy:
        # 0.2 x median |flow| of the noiseless standard scene
        cfg = RunConfig(
            flow_sigma=0.00308,
            accel_sigma=0.05,
            accel_bias=0.01,
            seed=seed,
        )
    return cfg
