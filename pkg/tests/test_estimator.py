"""Filtering, staggered differencing, the per-field quotient, the pipeline."""

import math

import numpy as np
import pytest

from flowvel.estimator import (
    DEFAULT_SMOOTHING_CUTOFF,
    ButterworthSpec,
    DerivativeConfig,
    EstimatorConfig,
    SMOOTHING_BUTTERWORTH,
    StreamingButterworth,
    VelocityPipeline,
    aggregate,
    butterworth_filter,
    finalize_velocity,
    per_field_velocity,
    staggered_derivative,
)
from flowvel.evaluate import rmse, run_estimator
from flowvel.geometry import CameraIntrinsics, build_angle_grid
from flowvel.simulate import NoiseSpec, ScenePlan, TrajectorySpec, simulate

FS = 30.0


def test_butterworth_coefficients_closed_form():
    # independent derivation: bilinear transform of the analog first-order
    # low-pass with prewarped cutoff gives, for cutoff fraction c,
    #   k = tan(pi c / 2), b0 = b1 = k/(1+k), a1 = (k-1)/(1+k)
    spec = ButterworthSpec()
    b, a = spec.coefficients()
    k = math.tan(math.pi * 0.04 / 2)
    assert b == pytest.approx([k / (1 + k)] * 2, abs=1e-15)
    assert a[0] == 1.0
    assert a[1] == pytest.approx((k - 1) / (1 + k), abs=1e-15)
    # frozen values for the default cutoff
    np.testing.assert_allclose(b, 0.059190703818405445, rtol=0, atol=1e-15)
    assert a[1] == pytest.approx(-0.8816185923631891, abs=1e-15)


def test_butterworth_dc_gain_exactly_one():
    spec = ButterworthSpec()
    b, a = spec.coefficients()
    assert b.sum() / a.sum() == pytest.approx(1.0, abs=1e-9)
    y = butterworth_filter(np.full(50, 3.7), spec, FS)
    np.testing.assert_allclose(y, 3.7, rtol=0, atol=1e-9)  # primed state, no transient


def test_butterworth_minus_3db_at_cutoff():
    spec = ButterworthSpec()
    fc = 0.04 * FS / 2.0
    t = np.arange(int(200 * FS)) / FS
    x = np.sin(2 * math.pi * fc * t)
    y = butterworth_filter(x, spec, FS)
    half = t.size // 2
    # quadrature projection recovers the steady-state amplitude
    c = np.cos(2 * math.pi * fc * t[half:])
    s = np.sin(2 * math.pi * fc * t[half:])
    amp = math.hypot(2 * np.mean(y[half:] * s), 2 * np.mean(y[half:] * c))
    assert amp == pytest.approx(1 / math.sqrt(2), rel=5e-3)


def test_butterworth_group_delay():
    spec = ButterworthSpec()
    # closed form p/(1-p) + 1/2 (pole term plus the zero at Nyquist)
    assert spec.group_delay_samples() == pytest.approx(7.947272421932649, abs=1e-12)
    # independent numeric check near DC
    import scipy.signal as sig
    b, a = spec.coefficients()
    _, gd = sig.group_delay((b, a), w=[1e-9])
    assert spec.group_delay_samples() == pytest.approx(float(gd[0]), abs=1e-9)


def test_butterworth_spec_validation():
    with pytest.raises(ValueError):
        ButterworthSpec(order=0)
    with pytest.raises(ValueError):
        ButterworthSpec(cutoff_fraction_of_nyquist=0.0)
    with pytest.raises(ValueError):
        ButterworthSpec(cutoff_fraction_of_nyquist=1.0)


def test_streaming_matches_batch_filter():
    rng = np.random.default_rng(17)
    x = rng.normal(size=200)
    spec = ButterworthSpec()
    batch = butterworth_filter(x, spec, FS)
    f = StreamingButterworth(spec, 1)
    stream = np.array([float(f.step(np.array([v]))[0]) for v in x])
    np.testing.assert_allclose(stream, batch, rtol=0, atol=1e-12)


def test_streaming_filter_vector_channels():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(100, 3))
    spec = ButterworthSpec()
    f = StreamingButterworth(spec, 3)
    got = np.stack([f.step(row) for row in x])
    for j in range(3):
        np.testing.assert_allclose(got[:, j], butterworth_filter(x[:, j], spec, FS),
                                   rtol=0, atol=1e-12)
    f.reset()
    assert np.array_equal(f.step(x[0]), got[0])


def test_staggered_derivative_exact_on_affine():
    t = np.arange(40) / FS
    x = 3.0 + 2.0 * t
    d = staggered_derivative(x, DerivativeConfig(), FS)
    assert np.all(np.isnan(d[:5]))
    np.testing.assert_allclose(d[5:], 2.0, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        staggered_derivative(x, DerivativeConfig(), 0.0)
    with pytest.raises(ValueError):
        DerivativeConfig(derivative_stagger_frames=0)


def test_per_field_velocity_hand_value():
    # a=0.5, r_bar=0.2, r2_bar=0.05, rdot=0.01: den=0.04, v = 0.5*(-0.2)/0.04
    assert per_field_velocity(0.2, 0.05, 0.01, 0.5) == pytest.approx(-2.5, rel=1e-14)


def test_per_field_velocity_exact_for_mixed_depths():
    # pooled over two depths d1, d2 with weights 1/2 under the forward model:
    # r_bar = v h, r2_bar = v^2 q, rdot_bar = a h + v^2 q (h = mean 1/d,
    # q = mean 1/d^2), so r2_bar - rdot_bar = -a h and the quotient returns v
    v, a = 1.3, 0.7
    d = np.array([2.0, 5.0])
    h = np.mean(1 / d)
    q = np.mean(1 / d**2)
    r_bar = v * h
    r2_bar = v * v * q
    r_dot = a * h + v * v * q
    assert per_field_velocity(r_bar, r2_bar, r_dot, a) == pytest.approx(v, rel=1e-14)


def test_per_field_velocity_degenerate_returns_none():
    assert per_field_velocity(0.2, 0.01, 0.01, 0.5) is None
    # guard boundary (denominators exact by Sterbenz): at eps passes, below fails
    assert per_field_velocity(0.2, 2e-4, 1e-4, 0.5, eps_denom=1e-4) is not None
    assert per_field_velocity(0.2, 1.5e-4, 1e-4, 0.5, eps_denom=1e-4) is None


def test_aggregate_median():
    assert aggregate([1.0, 2.0, 3.0, 4.0]) == 2.5
    assert aggregate([5.0]) == 5.0
    assert aggregate([3.0, 1.0, 2.0]) == 2.0
    with pytest.raises(ValueError):
        aggregate([])


def test_finalize_velocity_rotation_correction():
    v_sm, v_corr = finalize_velocity(np.full(10, 2.0), np.full(10, math.pi / 3),
                                     ButterworthSpec(), FS)
    np.testing.assert_allclose(v_sm, 2.0, rtol=0, atol=1e-9)
    np.testing.assert_allclose(v_corr, 1.0, rtol=0, atol=1e-9)


def test_estimator_config_defaults_and_validation():
    cfg = EstimatorConfig()
    assert cfg.output_filter.cutoff_fraction_of_nyquist == DEFAULT_SMOOTHING_CUTOFF
    assert cfg.derivative.prefilter.cutoff_fraction_of_nyquist == 0.04
    with pytest.raises(ValueError):
        EstimatorConfig(smoothing="nope")
    with pytest.raises(ValueError):
        EstimatorConfig(second_moment_mode="nope")


# --- pipeline-level behavior on small scenes -------------------------------

INTR = CameraIntrinsics(width_px=32, height_px=24, hfov_rad=math.radians(60),
                        vfov_rad=math.radians(45))
GRID = build_angle_grid(INTR)


def small_plan(v0=1.0, segments=((8.0, -0.3),), duration=6.0, d0_range=(4.0, 12.0)):
    d0 = np.tile(np.linspace(d0_range[0], d0_range[1], INTR.width_px),
                 (INTR.height_px, 1))
    return ScenePlan(depth_map0=d0, trajectory=TrajectorySpec(v0=v0, segments=segments),
                     intrinsics=INTR, fps=30.0, duration_s=duration)


def small_config(**over):
    base = dict(n_fields=12, field_deg=8.0)
    base.update(over)
    return EstimatorConfig(**base)


def test_pipeline_group_delay_value():
    pipe = VelocityPipeline(GRID, small_config())
    # prefilter delay + half the derivative window - half the flow window
    assert pipe.group_delay_s == pytest.approx(0.24824241406442157, abs=1e-12)
    assert pipe.smoothed_delay_s == pipe.group_delay_s  # complementary adds none
    assert pipe.warmup_frames == 11
    pipe_bw = VelocityPipeline(GRID, small_config(smoothing=SMOOTHING_BUTTERWORTH))
    assert pipe_bw.smoothed_delay_s > pipe_bw.group_delay_s


def test_pipeline_tracks_constant_acceleration():
    run = run_estimator(simulate(small_plan()), GRID, small_config())
    t, err = run.error_series("corrected")
    after = t >= run.warmup_end_s()
    assert after.sum() > 100
    assert rmse(err[after]) < 0.02
    assert int(run.degenerate.sum()) == 0  # constant accel never trips the gate


def test_pipeline_flags_zero_acceleration_as_degenerate():
    run = run_estimator(
        simulate(small_plan(segments=((8.0, 0.0),), d0_range=(8.0, 16.0))),
        GRID, small_config())
    # steady state: the quotient denominator collapses, every field drops out
    assert run.degenerate[run.n_estimates // 2:].all()
    # coasting on zero measured acceleration holds the initial zero
    np.testing.assert_allclose(run.v_median, 0.0, rtol=0, atol=1e-12)


def test_alignment_beats_naive_dataflow_through_a_flip():
    plan = small_plan(segments=((3.0, -0.5), (3.0, 0.5)))
    aligned = run_estimator(simulate(plan), GRID, small_config())
    naive = run_estimator(simulate(plan), GRID, small_config(align_statistics=False))
    ta, ea = aligned.error_series("median")
    tn, en = naive.error_series("median")
    ra = rmse(ea[ta >= aligned.warmup_end_s()])
    rn = rmse(en[tn >= naive.warmup_end_s()])
    assert ra < 0.05
    assert rn > 5 * ra


def test_pipeline_diagnostics_optional():
    plan = small_plan(duration=2.0)
    lean = run_estimator(simulate(plan), GRID, small_config())
    assert lean.diag_r_bar is None
    rich = run_estimator(simulate(plan), GRID,
                         small_config(collect_diagnostics=True))
    n_fields = rich.diag_r_bar.shape[1]
    assert rich.diag_r_bar.shape == rich.diag_r2_bar.shape == rich.diag_r_dot.shape
    assert rich.diag_r_bar.shape[0] == rich.n_estimates
    assert n_fields == 12
    assert rich.diag_accel.shape == (rich.n_estimates,)
