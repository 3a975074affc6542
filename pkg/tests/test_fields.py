"""Receptive-field bank construction and pooled first/second moments."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowvel.fields import (
    LAYOUT_60X45_DEG,
    LAYOUT_69X42_DEG,
    build_bank,
    pool,
    pool_arrays,
)
from flowvel.frontend import RatioMap
from flowvel.geometry import CameraIntrinsics, build_angle_grid


def grid_for(w, h, hfov_deg, vfov_deg):
    return build_angle_grid(CameraIntrinsics(
        width_px=w, height_px=h,
        hfov_rad=math.radians(hfov_deg), vfov_rad=math.radians(vfov_deg)))


STD = grid_for(240, 180, 60, 45)
WIDE = grid_for(230, 140, 69, 42)


def test_default_bank_on_60x45():
    bank = build_bank(STD)
    assert bank.n_fields == 90
    assert bank.layout == LAYOUT_60X45_DEG == (9, 10)
    # centers span the usable field of view (fov minus one field width)
    assert bank.fields[0].center_deg == pytest.approx((-27.5, -20.0), abs=1e-9)
    assert bank.fields[-1].center_deg == pytest.approx((27.5, 20.0), abs=1e-9)


def test_default_bank_on_69x42():
    bank = build_bank(WIDE)
    assert bank.n_fields == 90
    assert bank.layout == LAYOUT_69X42_DEG == (6, 15)


def test_field_weights_sum_to_one():
    bank = build_bank(STD)
    for f in bank.fields:
        assert f.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert f.pixel_indices.size == f.weights.size > 0


def test_fully_masked_center_placement_is_dropped():
    # 3x3 lattice on a 10 deg fov: the exact-center field's whole support
    # sits inside the 3 degree cone and is skipped; ids stay contiguous
    g = grid_for(60, 60, 10, 10)
    bank = build_bank(g, n_fields=9, field_deg=5.0)
    assert bank.n_fields == 8
    assert [f.id for f in bank.fields] == list(range(8))
    assert all(abs(f.center_deg[0]) > 1 or abs(f.center_deg[1]) > 1
               for f in bank.fields)


def test_unbuildable_bank_raises():
    g = grid_for(20, 20, 4, 4)  # every pixel inside the masked cone
    with pytest.raises(ValueError, match="unmasked support"):
        build_bank(g, n_fields=1, field_deg=4.0)


def test_build_bank_validation():
    with pytest.raises(ValueError):
        build_bank(STD, n_fields=0)
    with pytest.raises(ValueError):
        build_bank(STD, field_deg=0.0)


def brute_force_pool(ratio, bank):
    """Reference pooling: per-field loop, renormalizing over unmasked pixels."""
    r = ratio.r.ravel()
    m = ratio.mask.ravel()
    out = []
    for f in bank.fields:
        keep = m[f.pixel_indices]
        wsum = f.weights[keep].sum()
        if wsum == 0:
            out.append((f.id, None, None))
            continue
        w = f.weights[keep] / wsum
        vals = r[f.pixel_indices][keep]
        out.append((f.id, float(w @ vals), float(w @ (vals * vals))))
    return out


def test_pool_matches_brute_force():
    g = grid_for(48, 36, 60, 45)
    bank = build_bank(g, n_fields=12, field_deg=8.0)
    rng = np.random.default_rng(21)
    ratio = RatioMap(r=rng.normal(0.3, 0.2, g.shape),
                     mask=rng.random(g.shape) > 0.3, t=0.0)
    r_bar, r2_bar, support, emitted = pool_arrays(ratio, bank)
    ref = brute_force_pool(ratio, bank)
    for fid, rb, r2b in ref:
        if rb is None:
            assert not emitted[fid]
            continue
        assert emitted[fid]
        assert r_bar[fid] == pytest.approx(rb, rel=1e-9, abs=1e-12)
        assert r2_bar[fid] == pytest.approx(r2b, rel=1e-9, abs=1e-12)


def test_pool_list_matches_arrays():
    g = grid_for(48, 36, 60, 45)
    bank = build_bank(g, n_fields=12, field_deg=8.0)
    rng = np.random.default_rng(3)
    ratio = RatioMap(r=rng.normal(size=g.shape), mask=np.ones(g.shape, bool), t=1.5)
    stats = pool(ratio, bank)
    r_bar, r2_bar, support, emitted = pool_arrays(ratio, bank)
    assert len(stats) == int(emitted.sum()) == bank.n_fields
    for s in stats:
        assert s.r_bar == r_bar[s.field_id]
        assert s.r2_bar == r2_bar[s.field_id]
        assert s.support_count == support[s.field_id]
        assert s.t == 1.5


def test_pool_half_zeros_half_ones():
    # binary ratio: mean and second moment are both the fraction of ones
    g = grid_for(16, 16, 40, 40)
    bank = build_bank(g, n_fields=1, field_deg=40.0)
    f = bank.fields[0]
    r = np.zeros(g.shape)
    flat = r.ravel()
    half = f.pixel_indices.size // 2
    flat[f.pixel_indices[:half]] = 1.0
    ratio = RatioMap(r=r, mask=np.ones(g.shape, bool), t=0.0)
    r_bar, r2_bar, _, emitted = pool_arrays(ratio, bank)
    frac = half / f.pixel_indices.size
    assert emitted[0]
    assert r_bar[0] == pytest.approx(frac, abs=1e-14)
    assert r2_bar[0] == pytest.approx(frac, abs=1e-14)
    # strict Jensen gap for a non-constant field
    assert r2_bar[0] > r_bar[0] ** 2


def test_pool_renormalizes_under_mask():
    g = grid_for(16, 16, 40, 40)
    bank = build_bank(g, n_fields=1, field_deg=40.0)
    f = bank.fields[0]
    r = np.full(g.shape, 2.0)
    mask = np.zeros(g.shape, bool)
    mask.ravel()[f.pixel_indices[::3]] = True  # keep a third of the support
    ratio = RatioMap(r=r, mask=mask, t=0.0)
    r_bar, r2_bar, support, emitted = pool_arrays(ratio, bank)
    assert emitted[0]
    assert r_bar[0] == pytest.approx(2.0, rel=1e-12)
    assert r2_bar[0] == pytest.approx(4.0, rel=1e-12)
    assert support[0] == mask.sum()


def test_pool_scaling_linearity():
    g = grid_for(32, 24, 60, 45)
    bank = build_bank(g, n_fields=6, field_deg=10.0)
    rng = np.random.default_rng(8)
    r = rng.normal(size=g.shape)
    mask = np.ones(g.shape, bool)
    b1, b2, _, _ = pool_arrays(RatioMap(r=r, mask=mask, t=0.0), bank)
    s1, s2, _, _ = pool_arrays(RatioMap(r=3.0 * r, mask=mask, t=0.0), bank)
    np.testing.assert_allclose(s1, 3.0 * b1, rtol=1e-12)
    np.testing.assert_allclose(s2, 9.0 * b2, rtol=1e-12)


def test_pool_empty_mask_not_emitted():
    g = grid_for(16, 16, 40, 40)
    bank = build_bank(g, n_fields=1, field_deg=40.0)
    ratio = RatioMap(r=np.ones(g.shape), mask=np.zeros(g.shape, bool), t=0.0)
    r_bar, r2_bar, support, emitted = pool_arrays(ratio, bank)
    assert not emitted[0]
    assert pool(ratio, bank) == []


def test_pool_shape_mismatch():
    bank = build_bank(STD)
    with pytest.raises(ValueError):
        pool_arrays(RatioMap(r=np.zeros((2, 2)), mask=np.ones((2, 2), bool), t=0.0),
                    bank)


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000), loc=st.floats(-1, 1), scale=st.floats(0.01, 2))
def test_pooled_second_moment_jensen(seed, loc, scale):
    # E[r^2] >= (E[r])^2 under any weighting: holds for every emitted field
    g = grid_for(24, 18, 60, 45)
    bank = build_bank(g, n_fields=6, field_deg=10.0)
    rng = np.random.default_rng(seed)
    ratio = RatioMap(r=rng.normal(loc, scale, g.shape),
                     mask=rng.random(g.shape) > 0.2, t=0.0)
    r_bar, r2_bar, _, emitted = pool_arrays(ratio, bank)
    assert np.all(r2_bar[emitted] >= r_bar[emitted] ** 2 - 1e-12)
