"""Pinhole viewing geometry: pixel-to-angle mapping and the forward-motion flow model.

A feature at forward distance d and lateral offset l is seen at the view angle
alpha with tan(alpha) = l/d. Pure forward translation at speed v moves the image
of that feature at

    alpha_dot = -(v/d) * cos(alpha) * sin(alpha)

which is the measurement model everything downstream inverts. Angles are
precomputed per pixel once; per-frame work only multiplies cached arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    """Image size and field of view of a calibrated pinhole camera."""

    width_px: int
    height_px: int
    hfov_rad: float
    vfov_rad: float

    def __post_init__(self):
        if not (isinstance(self.width_px, (int, np.integer)) and self.width_px >= 2):
            raise ValueError(f"width_px must be an integer >= 2, got {self.width_px!r}")
        if not (isinstance(self.height_px, (int, np.integer)) and self.height_px >= 2):
            raise ValueError(f"height_px must be an integer >= 2, got {self.height_px!r}")
        for name in ("hfov_rad", "vfov_rad"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float)) and math.isfinite(val) and 0.0 < val < math.pi):
                raise ValueError(f"{name} must be finite and in (0, pi), got {val!r}")


@dataclass(frozen=True)
class AngleGrid:
    """Per-pixel view angles and cached cos(alpha)*sin(alpha) factors.

    alpha_h varies along columns (positive to the right of the optical axis),
    alpha_v along rows (positive downward from it). Pixel centers sit at
    half-integer offsets, so even-sized images have no pixel exactly on axis.
    Immutable after construction; safe to share across threads.
    """

    alpha_h: np.ndarray  # (H, W)
    alpha_v: np.ndarray  # (H, W)
    cs_h: np.ndarray  # cos(alpha_h) * sin(alpha_h)
    cs_v: np.ndarray  # cos(alpha_v) * sin(alpha_v)
    intrinsics: CameraIntrinsics

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha_h.shape


def _axis_angles(n_px: int, fov_rad: float) -> np.ndarray:
    # true pinhole: image-plane coordinate is linear in tan(angle), not in angle
    half_tan = math.tan(fov_rad / 2.0)
    frac = (2.0 * (np.arange(n_px) + 0.5) / n_px) - 1.0
    return np.arctan(frac * half_tan)


def build_angle_grid(intrinsics: CameraIntrinsics) -> AngleGrid:
    """Map pixel centers to view angles: alpha(x) = atan((2(x+0.5)/W - 1) tan(hfov/2))."""
    ah = _axis_angles(intrinsics.width_px, intrinsics.hfov_rad)
    av = _axis_angles(intrinsics.height_px, intrinsics.vfov_rad)
    alpha_h = np.broadcast_to(ah[None, :], (intrinsics.height_px, intrinsics.width_px)).copy()
    alpha_v = np.broadcast_to(av[:, None], (intrinsics.height_px, intrinsics.width_px)).copy()
    grid = AngleGrid(
        alpha_h=alpha_h,
        alpha_v=alpha_v,
        cs_h=np.cos(alpha_h) * np.sin(alpha_h),
        cs_v=np.cos(alpha_v) * np.sin(alpha_v),
        intrinsics=intrinsics,
    )
    for arr in (grid.alpha_h, grid.alpha_v, grid.cs_h, grid.cs_v):
        arr.setflags(write=False)
    return grid


def forward_flow_model(v: float, d, alpha):
    """Angular velocity of the image of a feature under pure forward motion.

    v may be any finite speed (negative = backward); d must be positive and
    |alpha| < pi/2. Accepts scalars or arrays for d and alpha.
    """
    d = np.asarray(d, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(d <= 0):
        raise ValueError("feature distance d must be > 0")
    if np.any(np.abs(alpha) >= math.pi / 2):
        raise ValueError("view angle must satisfy |alpha| < pi/2")
    out = -(v / d) * np.cos(alpha) * np.sin(alpha)
    return float(out) if out.ndim == 0 else out
