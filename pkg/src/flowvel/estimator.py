"""Velocity estimation from pooled flow statistics plus measured acceleration.

Per receptive field, with r = v/d pooled into r_bar and r2_bar and the
derivative rdot_bar taken by staggered finite difference,

    v_field = a * (-r_bar) / (r2_bar - rdot_bar)

is exact for constant-acceleration motion over a rigid scene and any mix of
pixel depths: differentiating r = v/d gives rdot = (a d + v^2)/d^2, so pooled
over weights w the denominator collapses to r2_bar - rdot_bar = -a * hbar with
hbar = sum w/d, and the quotient returns v times the pooled harmonic depth
identity. The median over fields rejects outliers, and the result is smoothed.

Timing alignment (the part that decides whether this works at all): every
series entering the quotient must carry the same group delay. The pipeline
therefore applies the same first-order low-pass to r_bar, to r2_bar, and to
the window-averaged acceleration; the staggered derivative of the filtered
r_bar telescopes to an exact window integral, so its companion statistics are
the matching trapezoid window over the same filtered history, and the
acceleration channel is the plain mean over the derivative window (sample
differences of block-mean integrated series are exact integrals). With that,
numerator and denominator cross zero together at acceleration sign flips and
the quotient stays finite through the transients. The resulting estimate
stamped t_i describes v(t_i - D) with the analytic delay D = (filter DC group
delay) + (derivative window)/2 - (flow stagger window)/2, exposed as
group_delay_s; evaluation must compare against truth shifted by D.

Per-field error bound (noiseless, piecewise-constant acceleration): for
frames at least dt >= 0.2 s from the nearest acceleration discontinuity,

    |v_field(t) - v(t - D)| <= 2 |delta_a| tau_c exp(-dt / tau_c) + e_ss
    e_ss <= (0.25 s^2 * rbar_max^2 + 0.004) |v|_max
          = 0.020 m/s for field ratios up to 0.25 1/s at |v| = 1 m/s

where tau_c = 1/(2 pi f_c) is the prefilter time constant (0.265 s at the
default 0.6 Hz cutoff) and delta_a the acceleration jump. The transient term
is the filter's fading memory of the jump (factor 2 covers the numerator and
denominator crossing zero at slightly different residual phases); e_ss is the
steady discretization residual of the window statistics, which grows as the
square of the field's pooled ratio (verified per field on the reference
scene: max error 0.012 m/s once transients decay, carried by the fields
viewing the closest surface). Inside dt < 0.2 s the quotient can pass
arbitrarily close to the denominator guard and no pointwise bound holds;
those frames are what the observability gate removes from the median path.
At dt = 1.2 s from a 1 m/s^2 jump the bound is 0.026 m/s; the acceptance
margin is 0.06 m/s.

Scale is unobservable while the measured acceleration is near zero. Frames
where the filtered acceleration magnitude drops below 0.75x its recent block
maximum, or where no field clears the denominator guard, are flagged
degenerate; the estimate coasts on the delayed measured acceleration (dead
reckoning) until observability returns. The gate is purely relative so the
whole estimator is exactly equivariant under world scaling
(d, v, a) -> (k d, k v, k a).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np
from scipy import signal

from .fields import FieldBank, build_bank, DEFAULT_N_FIELDS, DEFAULT_FIELD_DEG
from .frontend import (
    DEFAULT_CENTER_MASK_DEG,
    FlowField,
    StaggerBuffer,
    StaggerConfig,
    direction_validity,
    _radial_directions,
)
from .geometry import AngleGrid

DEFAULT_EPS_DENOM = 1e-4  # s^-2, field denominator guard
GATE_REL = 0.75  # degenerate when |a_filtered| < GATE_REL * recent max |a|
# output-smoother cutoff (fraction of Nyquist), grid-tuned on a held-out
# noisy run; the statistic prefilters stay at the standard 0.04
DEFAULT_SMOOTHING_CUTOFF = 0.025

SMOOTHING_COMPLEMENTARY = "complementary"
SMOOTHING_BUTTERWORTH = "butterworth"
SECOND_MOMENT_POOLED = "pooled"
SECOND_MOMENT_SQUARED_MEAN = "squared_mean"


@dataclass(frozen=True)
class ButterworthSpec:
    """Causal low-pass: analog Butterworth discretized by bilinear transform."""

    order: int = 1
    cutoff_fraction_of_nyquist: float = 0.04

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if not 0.0 < self.cutoff_fraction_of_nyquist < 1.0:
            raise ValueError("cutoff fraction must be in (0, 1)")

    def coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        b, a = signal.butter(self.order, self.cutoff_fraction_of_nyquist)
        return b, a

    def group_delay_samples(self) -> float:
        """DC group delay of the discrete filter, plus the half-sample from the
        bilinear zero at Nyquist; first order has the closed form p/(1-p)+1/2."""
        b, a = self.coefficients()
        if self.order == 1:
            p = -a[1]
            return p / (1.0 - p) + 0.5
        _, gd = signal.group_delay((b, a), w=[1e-9])
        return float(gd[0])

    def time_constant_s(self, fs: float) -> float:
        fc = self.cutoff_fraction_of_nyquist * fs / 2.0
        return 1.0 / (2.0 * math.pi * fc)


@dataclass(frozen=True)
class DerivativeConfig:
    derivative_stagger_frames: int = 5
    prefilter: ButterworthSpec = field(default_factory=ButterworthSpec)

    def __post_init__(self):
        if self.derivative_stagger_frames < 1:
            raise ValueError("derivative_stagger_frames must be >= 1")


class StreamingButterworth:
    """Streaming IIR (direct form II transposed) over a vector of channels.

    State is primed at the first sample so a constant input produces that
    constant from sample 0 (no zero-state startup transient); equivalent to
    scipy.signal.lfilter with zi = lfilter_zi(b, a) * x[0].
    """

    def __init__(self, spec: ButterworthSpec, n_channels: int):
        self.b, self.a = spec.coefficients()
        self._zi_unit = signal.lfilter_zi(self.b, self.a)  # state for unit constant input
        self.n_channels = n_channels
        self._z = None

    def step(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._z is None:
            self._z = np.outer(self._zi_unit, x)
        b, a, z = self.b, self.a, self._z
        y = b[0] * x + z[0]
        for k in range(len(b) - 2):
            z[k] = b[k + 1] * x + z[k + 1] - a[k + 1] * y
        z[-1] = b[-1] * x - a[-1] * y
        return y

    def reset(self):
        self._z = None


def butterworth_filter(x, spec: ButterworthSpec, fs: float) -> np.ndarray:
    """Causal low-pass over a series sampled at fs. DC gain is exactly 1; state
    primed at the first sample (constant in -> same constant out, immediately)."""
    if fs <= 0:
        raise ValueError("fs must be positive")
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x.copy()
    b, a = spec.coefficients()
    zi = signal.lfilter_zi(b, a) * x[0]
    y, _ = signal.lfilter(b, a, x, zi=zi)
    return y


def staggered_derivative(series, cfg: DerivativeConfig, fs: float) -> np.ndarray:
    """Finite difference across a multi-frame gap: (x_i - x_{i-s}) * fs / s.

    Returns an array the length of the input with NaN during warm-up (the
    first s samples have no partner). Exact on affine series; the wide gap
    trades group delay (s/2 samples) for noise suppression.
    """
    if fs <= 0:
        raise ValueError("fs must be positive")
    x = np.asarray(series, dtype=float)
    s = cfg.derivative_stagger_frames
    out = np.full(x.shape, np.nan)
    if x.size > s:
        out[s:] = (x[s:] - x[:-s]) * fs / s
    return out


def per_field_velocity(r_bar: float, r2_bar: float, r_dot: float, accel: float,
                       eps_denom: float = DEFAULT_EPS_DENOM) -> float | None:
    """v = a (-r_bar) / (r2_bar - r_dot); None when the denominator is inside
    the degeneracy guard (the zero-acceleration manifold, where scale is
    unobservable: constant velocity makes rdot = r^2 identically)."""
    den = r2_bar - r_dot
    if abs(den) < eps_denom:
        return None
    return accel * (-r_bar) / den


def _median_1d(vals: np.ndarray) -> float:
    """np.median for a finite 1-d array, minus its dispatch overhead (this
    sits on the per-frame path where the array is ~90 floats)."""
    n = vals.size
    k = n >> 1
    if n & 1:
        return float(np.partition(vals, k)[k])
    p = np.partition(vals, (k - 1, k))
    return 0.5 * (float(p[k - 1]) + float(p[k]))


def aggregate(v_fields) -> float:
    """Exact median of the per-field estimates (mean of the middle two when
    the count is even). Raises on an empty list; the pipeline handles that
    case by holding and flagging instead of calling this."""
    vals = np.asarray(list(v_fields), dtype=float)
    if vals.size == 0:
        raise ValueError("no valid per-field velocities to aggregate")
    return float(np.median(vals))


def finalize_velocity(v_median_series, yaw_delta_series, spec: ButterworthSpec, fs: float):
    """Smooth the median series and apply the rotation correction cos(yaw_delta).

    Returns (v_smoothed, v_corrected). This is the plain causal-filter
    finalization; the streaming pipeline's default smoothing is the
    complementary variant (see VelocityPipeline).
    """
    v_sm = butterworth_filter(v_median_series, spec, fs)
    yaw = np.asarray(yaw_delta_series, dtype=float)
    return v_sm, v_sm * np.cos(yaw)


@dataclass(frozen=True)
class EstimatorConfig:
    stagger: StaggerConfig = field(default_factory=StaggerConfig)
    derivative: DerivativeConfig = field(default_factory=DerivativeConfig)
    output_filter: ButterworthSpec = field(
        default_factory=lambda: ButterworthSpec(
            cutoff_fraction_of_nyquist=DEFAULT_SMOOTHING_CUTOFF
        )
    )
    n_fields: int = DEFAULT_N_FIELDS
    field_deg: float = DEFAULT_FIELD_DEG
    center_mask_deg: float = DEFAULT_CENTER_MASK_DEG
    eps_denom: float = DEFAULT_EPS_DENOM
    # alignment of the quotient's input series (see module docstring); False
    # reproduces the naive dataflow (prefilter only the derivative channel,
    # raw pooled statistics, plain output smoothing) for comparison runs
    align_statistics: bool = True
    # denominator second moment: pooled second moment (exact identity) or the
    # squared pooled mean (ablation)
    second_moment_mode: str = SECOND_MOMENT_POOLED
    smoothing: str = SMOOTHING_COMPLEMENTARY
    gate_rel: float = GATE_REL
    # stash the per-field pooled statistics in each estimate (used by the
    # closed-form depth evaluation); off by default to keep frames light
    collect_diagnostics: bool = False

    def __post_init__(self):
        if self.second_moment_mode not in (SECOND_MOMENT_POOLED, SECOND_MOMENT_SQUARED_MEAN):
            raise ValueError(f"unknown second_moment_mode {self.second_moment_mode!r}")
        if self.smoothing not in (SMOOTHING_COMPLEMENTARY, SMOOTHING_BUTTERWORTH):
            raise ValueError(f"unknown smoothing {self.smoothing!r}")


@dataclass
class VelocityEstimate:
    t: float  # stamp of the flow window start; describes v(t - group_delay_s)
    v_per_field: np.ndarray  # (n_fields,), NaN where the field emitted nothing
    v_median: float  # post-gate median path (coasted value on degenerate frames)
    v_smoothed: float
    v_corrected: float  # v_smoothed * cos(window yaw change)
    n_valid_fields: int
    degenerate: bool  # scale unobservable this frame (gated or no valid field)
    # per-field statistics behind v_per_field; populated only when the config
    # sets collect_diagnostics (all refer to time t - group_delay_s)
    r_bar: np.ndarray | None = None
    r2_bar: np.ndarray | None = None
    r_dot: np.ndarray | None = None
    accel_used: float | None = None


class VelocityPipeline:
    """Streaming wiring of the full velocity path for one camera.

    push(flow, accel_meas, gyro_meas) per frame; returns None during warm-up
    (flow stagger + derivative history filling), then one VelocityEstimate per
    frame. accel_meas/gyro_meas are the block-mean IMU readings for the frame
    interval ending at the frame's timestamp.

    Per-frame work is split into named steps for the timing report:
    1a_flow_alignment (stagger + derotate + matched filter), 2_ratio_map,
    3_field_pooling (pooled stats, prefilters, staggered derivative),
    4_field_velocity, 5_median (gate/coast included), 6_smoothing.
    """

    def __init__(self, grid: AngleGrid, config: EstimatorConfig = EstimatorConfig(),
                 bank: FieldBank | None = None):
        self.grid = grid
        self.config = config
        self.bank = bank if bank is not None else build_bank(
            grid, config.n_fields, config.field_deg, config.center_mask_deg
        )
        cfg = config
        self.fps = cfg.stagger.fps
        self._stagger = StaggerBuffer(cfg.stagger)
        self._sflow = cfg.stagger.flow_stagger_frames
        self._sder = cfg.derivative.derivative_stagger_frames
        self._flow_weights = cfg.stagger.weights()

        # per-pixel caches: ratio-map weights and matched-filter directions
        valid_h, valid_v = direction_validity(grid, cfg.center_mask_deg)
        with np.errstate(divide="ignore"):
            self._wh = np.where(valid_h, -1.0 / grid.cs_h, 0.0)
            self._wv = np.where(valid_v, -1.0 / grid.cs_v, 0.0)
        cnt = valid_h.astype(float) + valid_v.astype(float)
        self._pix_mask = cnt > 0
        self._inv_cnt = np.divide(1.0, cnt, out=np.zeros_like(cnt), where=self._pix_mask)
        self._eu, self._ev = _radial_directions(grid)
        # scratch planes reused every frame; fresh allocations this size go
        # straight to mmap and the page faults dominate the ratio-map step
        self._r_buf = np.empty(grid.shape)
        self._t_buf = np.empty(grid.shape)
        self._sq_buf = np.empty(grid.shape[0] * grid.shape[1])

        # the pixel mask is static, so per-field weight sums (the pooling
        # renormalizers) are constant and one sparse product per frame is saved
        m = self._pix_mask.ravel().astype(float)
        wm = self.bank._wmat @ m
        self._emitted_static = wm > 0
        self._inv_wm = np.divide(1.0, wm, out=np.zeros_like(wm), where=self._emitted_static)

        n = self.bank.n_fields
        self._filt_r = StreamingButterworth(cfg.derivative.prefilter, n)
        self._filt_r2 = StreamingButterworth(cfg.derivative.prefilter, n)
        self._filt_a = StreamingButterworth(cfg.derivative.prefilter, 1)
        self._filt_out = StreamingButterworth(cfg.output_filter, 1)
        self._hist = deque(maxlen=self._sder + 1)  # (r_f, r2_f, a_f)
        # trapezoid companion weights over the derivative window's s+1 samples
        dw = np.ones(self._sder + 1)
        dw[0] = dw[-1] = 0.5
        self._der_weights = dw / self._sder

        # group delay bookkeeping: estimate stamped t_i describes v(t_i - D)
        gd_s = cfg.derivative.prefilter.group_delay_samples() / self.fps
        self.group_delay_s = gd_s + self._sder / (2 * self.fps) - self._sflow / (2 * self.fps)
        d_frames = self.group_delay_s * self.fps
        self._nd = int(math.floor(d_frames))
        self._frac = d_frames - self._nd

        self._accel_hist: list[float] = []  # raw block means, index = frame
        self._gyro_win: deque[float] = deque(maxlen=self._sflow + 1)
        self._accel_win: deque[float] = deque(maxlen=self._sflow + 1)
        self._frame = 0  # next arrival index
        self._prev_v = 0.0
        self._have_prev = False
        self._p_imu = None  # complementary IMU channel
        self._timings: dict[str, list[float]] = {
            k: [] for k in ("1a_flow_alignment", "2_ratio_map", "3_field_pooling",
                            "4_field_velocity", "5_median", "6_smoothing")
        }

    @property
    def warmup_frames(self) -> int:
        return self._sflow + self._sder

    @property
    def smoothed_delay_s(self) -> float:
        """Alignment of the smoothed series: the complementary smoother adds no
        delay beyond the median path; plain output filtering adds its own."""
        if self.config.smoothing == SMOOTHING_COMPLEMENTARY:
            return self.group_delay_s
        return self.group_delay_s + self.config.output_filter.group_delay_samples() / self.fps

    def step_timings_s(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v) for k, v in self._timings.items()}

    def _delayed_accel(self, stamp_idx: int) -> float:
        """Measured acceleration at the estimate's internal time (t_i - D),
        linearly interpolated between the two spanning block means."""
        k0 = max(0, stamp_idx - self._nd)
        k1 = max(0, stamp_idx - self._nd - 1)
        a = self._accel_hist
        return (1.0 - self._frac) * a[k0] + self._frac * a[k1]

    def _gate_reference(self, stamp_idx: int) -> float:
        """Max |block-mean accel| over the 5 samples around the internal time;
        the max (not the mean) keeps sign-mixing flip windows from zeroing it."""
        lo = max(0, stamp_idx - self._nd - 3)
        hi = max(1, stamp_idx - self._nd + 2)
        window = self._accel_hist[lo:hi]
        return max(abs(x) for x in window) if window else 0.0

    def push(self, flow: FlowField, accel_meas: float, gyro_meas: float) -> VelocityEstimate | None:
        cfg = self.config
        self._accel_hist.append(float(accel_meas))
        self._gyro_win.append(float(gyro_meas))
        self._accel_win.append(float(accel_meas))
        arrival = self._frame
        self._frame += 1

        t0 = perf_counter()
        stag = self._stagger.push(flow)
        if stag is None:
            return None
        stamp_idx = arrival - self._sflow
        fw = self._flow_weights
        gyro_mean = float(np.dot(fw, self._gyro_win))
        accel_win = float(np.dot(fw, self._accel_win))
        u = stag.u + gyro_mean  # derotation, window-mean yaw model
        w = stag.w
        s = u * self._eu + w * self._ev  # matched filter: radial projection
        u = s * self._eu
        w = s * self._ev
        self._timings["1a_flow_alignment"].append(perf_counter() - t0)

        t0 = perf_counter()
        r = np.multiply(u, self._wh, out=self._r_buf)
        r += np.multiply(w, self._wv, out=self._t_buf)
        r *= self._inv_cnt
        self._timings["2_ratio_map"].append(perf_counter() - t0)

        t0 = perf_counter()
        rm = r.ravel()  # already zero at masked pixels (wh/wv are zero there)
        r_bar = (self.bank._wmat @ rm) * self._inv_wm
        r2_bar = (self.bank._wmat @ np.multiply(rm, rm, out=self._sq_buf)) * self._inv_wm
        emitted = self._emitted_static
        r_f = self._filt_r.step(r_bar)
        r2_f = self._filt_r2.step(r2_bar)
        a_f = float(self._filt_a.step(np.array([accel_win]))[0])
        self._hist.append((r_f.copy(), r2_f.copy(), a_f))
        if len(self._hist) < self._hist.maxlen:
            self._timings["3_field_pooling"].append(perf_counter() - t0)
            return None
        fps, sder = self.fps, self._sder
        r_dot = (self._hist[-1][0] - self._hist[0][0]) * fps / sder
        if cfg.align_statistics:
            dw = self._der_weights
            r_use = sum(wk * h[0] for wk, h in zip(dw, self._hist))
            r2_use = sum(wk * h[1] for wk, h in zip(dw, self._hist))
            # plain mean of the last s window-averages: matches the exact
            # integral the telescoped derivative difference represents
            a_use = sum(h[2] for h in list(self._hist)[1:]) / sder
        else:
            r_use, r2_use, a_use = r_bar, r2_bar, accel_win
        if cfg.second_moment_mode == SECOND_MOMENT_SQUARED_MEAN:
            r2_use = r_use * r_use
        self._timings["3_field_pooling"].append(perf_counter() - t0)

        t0 = perf_counter()
        # the pixel mask is static so every history entry carries the same
        # emitted set; no need to re-reduce it per frame
        den = r2_use - r_dot
        valid = emitted & (np.abs(den) >= cfg.eps_denom)
        v_fields = np.full(self.bank.n_fields, np.nan)
        nv = int(valid.sum())
        vals = None
        if nv:
            vals = a_use * (-r_use[valid]) / den[valid]
            v_fields[valid] = vals
        self._timings["4_field_velocity"].append(perf_counter() - t0)

        t0 = perf_counter()
        a_prop = self._delayed_accel(stamp_idx)
        if cfg.align_statistics:
            gated = nv == 0 or abs(a_use) < cfg.gate_rel * self._gate_reference(stamp_idx)
            if gated:
                # scale unobservable: dead-reckon on the delayed measured accel
                v_med = (self._prev_v + a_prop / fps) if self._have_prev else 0.0
            else:
                v_med = _median_1d(vals)
        else:
            gated = nv == 0
            v_med = self._prev_v if gated else _median_1d(vals)
        self._prev_v = v_med
        self._have_prev = True
        self._timings["5_median"].append(perf_counter() - t0)

        t0 = perf_counter()
        if cfg.smoothing == SMOOTHING_COMPLEMENTARY:
            if self._p_imu is None:
                self._p_imu = v_med
            else:
                self._p_imu += a_prop / fps
            resid = float(self._filt_out.step(np.array([v_med - self._p_imu]))[0])
            v_sm = self._p_imu + resid
        else:
            v_sm = float(self._filt_out.step(np.array([v_med]))[0])
        yaw_delta = gyro_mean * self._sflow / fps
        v_corr = v_sm * math.cos(yaw_delta)
        self._timings["6_smoothing"].append(perf_counter() - t0)

        diag = {}
        if cfg.collect_diagnostics:
            r_use_arr = np.asarray(r_use, dtype=float)
            diag = dict(
                r_bar=r_use_arr.copy(),
                r2_bar=np.asarray(r2_use, dtype=float).copy(),
                r_dot=r_dot.copy(),
                accel_used=float(a_use),
            )
        return VelocityEstimate(
            t=stag.t,
            v_per_field=v_fields,
            v_median=v_med,
            v_smoothed=v_sm,
            v_corrected=v_corr,
            n_valid_fields=nv,
            degenerate=bool(gated),
            **diag,
        )
