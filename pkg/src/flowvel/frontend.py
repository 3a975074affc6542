"""Flow frontend: staggered pairing, derotation, matched filtering, ratio maps.

Turns raw per-frame flow measurements into per-pixel r = v/d maps. The order
of operations per frame: stagger (average flow over a multi-frame window to
beat per-frame noise), derotate (remove the gyro-predicted rotational
component), matched-filter (project onto the radial expansion pattern that
pure forward motion must produce), then divide by -cos(alpha)sin(alpha) once
per direction and average the valid directional estimates.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import AngleGrid

DEFAULT_CENTER_MASK_DEG = 3.0  # singular cone |alpha| < 3 deg excluded from ratios

# weights for combining a window of flow sources into one staggered field
FLOW_COMBINE_INSTANTANEOUS = "instantaneous"  # trapezoid over stagger+1 samples
FLOW_COMBINE_DISPLACEMENT = "frame_displacement"  # plain mean of stagger fields


@dataclass
class FlowField:
    """Per-pixel angular velocity (rad/s): u horizontal, w vertical."""

    u: np.ndarray
    w: np.ndarray
    t: float

    def __post_init__(self):
        if self.u.shape != self.w.shape:
            raise ValueError("flow components must share a shape")


@dataclass
class RatioMap:
    """Per-pixel r = v/d (1/s) with validity mask; masked entries are zeroed."""

    r: np.ndarray
    mask: np.ndarray  # bool, True where r is usable
    t: float


@dataclass(frozen=True)
class StaggerConfig:
    flow_stagger_frames: int = 6
    fps: float = 30.0
    combine: str = FLOW_COMBINE_INSTANTANEOUS

    def __post_init__(self):
        if self.flow_stagger_frames < 1:
            raise ValueError("flow_stagger_frames must be >= 1")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.combine not in (FLOW_COMBINE_INSTANTANEOUS, FLOW_COMBINE_DISPLACEMENT):
            raise ValueError(f"unknown combine mode {self.combine!r}")

    @property
    def window_s(self) -> float:
        return self.flow_stagger_frames / self.fps

    def weights(self) -> np.ndarray:
        s = self.flow_stagger_frames
        if self.combine == FLOW_COMBINE_INSTANTANEOUS:
            # composite trapezoid: the window displacement is the time integral
            # of instantaneous flow; s+1 samples, half weight at the ends
            w = np.ones(s + 1)
            w[0] = w[-1] = 0.5
            return w / s
        # frame-to-frame displacement fields: their sum telescopes to the
        # window displacement, so the mean is already the staggered flow
        return np.full(s, 1.0 / s)


class StaggerBuffer:
    """Streaming staggered-flow former.

    push() returns None while warming up, then one FlowField per input frame.
    The output is the flow over [t_i, t_i + stagger/fps], i.e. the window
    displacement divided by the window duration, timestamped at the window
    start t_i (one output per input after warm-up, same rate).
    """

    def __init__(self, cfg: StaggerConfig):
        self.cfg = cfg
        self._weights = cfg.weights()
        self._frames: deque[FlowField] = deque(maxlen=len(self._weights))

    def push(self, flow: FlowField) -> FlowField | None:
        self._frames.append(flow)
        if len(self._frames) < self._frames.maxlen:
            return None
        wts = self._weights
        u = wts[0] * self._frames[0].u
        w = wts[0] * self._frames[0].w
        for k in range(1, len(wts)):
            u = u + wts[k] * self._frames[k].u
            w = w + wts[k] * self._frames[k].w
        return FlowField(u=u, w=w, t=self._frames[0].t)

    def reset(self):
        self._frames.clear()


def staggered_flow(frames, cfg: StaggerConfig) -> list[FlowField]:
    """Batch form of StaggerBuffer over a time-ordered sequence of FlowFields."""
    buf = StaggerBuffer(cfg)
    out = []
    for f in frames:
        got = buf.push(f)
        if got is not None:
            out.append(got)
    return out


def derotate(flow: FlowField, gyro_yaw: float, grid: AngleGrid) -> FlowField:
    """Remove the yaw-rotation flow component predicted by the gyro.

    Exact inverse of the simulator's rotational model (yaw adds -gyro_yaw to
    every pixel's horizontal angular velocity), so derotation adds +gyro_yaw.
    For staggered flow pass the window-averaged gyro reading.
    """
    if not np.isfinite(gyro_yaw):
        raise ValueError("gyro_yaw must be finite")
    if gyro_yaw == 0.0:
        return flow
    return FlowField(u=flow.u + gyro_yaw, w=flow.w, t=flow.t)


def _radial_directions(grid: AngleGrid) -> tuple[np.ndarray, np.ndarray]:
    nrm = np.hypot(grid.cs_h, grid.cs_v)
    safe = np.where(nrm > 0, nrm, 1.0)
    eu = np.where(nrm > 0, grid.cs_h / safe, 0.0)
    ev = np.where(nrm > 0, grid.cs_v / safe, 0.0)
    return eu, ev


def apply_full_matched_filter(flow: FlowField, grid: AngleGrid) -> FlowField:
    """Keep only the flow component consistent with pure forward motion.

    Forward motion produces flow along (cs_h, cs_v) at every pixel (outward
    from the image center, magnitude scaled by cos*sin). Each measured vector
    is projected onto that unit direction; the orthogonal part is discarded as
    noise. Pixels where the radial direction is undefined (exactly on-axis in
    both coordinates) emit zero. Idempotent by construction.
    """
    if flow.u.shape != grid.shape:
        raise ValueError("flow dimensions do not match the angle grid")
    eu, ev = _radial_directions(grid)
    s = flow.u * eu + flow.w * ev
    return FlowField(u=s * eu, w=s * ev, t=flow.t)


def direction_validity(grid: AngleGrid, center_mask_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-direction usability: |alpha| >= mask radius (the cos*sin division
    blows up noise as alpha -> 0, so a small central cone is excluded)."""
    thr = np.deg2rad(center_mask_deg)
    return np.abs(grid.alpha_h) >= thr, np.abs(grid.alpha_v) >= thr


def ratio_map(flow: FlowField, grid: AngleGrid, center_mask_deg: float = DEFAULT_CENTER_MASK_DEG) -> RatioMap:
    """Per-pixel r = v/d from matched-filtered, derotated flow.

    r_h = -u / (cos sin)(alpha_h) and r_v likewise; the output is the mean of
    whichever directional estimates are valid at that pixel (a direction is
    invalid inside the central cone). Pixels with no valid direction are
    masked, not errors. Sign: forward motion (v > 0) gives positive r.
    """
    if flow.u.shape != grid.shape:
        raise ValueError("flow dimensions do not match the angle grid")
    valid_h, valid_v = direction_validity(grid, center_mask_deg)
    r_h = np.divide(-flow.u, grid.cs_h, out=np.zeros(grid.shape), where=valid_h)
    r_v = np.divide(-flow.w, grid.cs_v, out=np.zeros(grid.shape), where=valid_v)
    cnt = valid_h.astype(float) + valid_v.astype(float)
    mask = cnt > 0
    r = np.divide(r_h + r_v, cnt, out=np.zeros(grid.shape), where=mask)
    return RatioMap(r=r, mask=mask, t=flow.t)
