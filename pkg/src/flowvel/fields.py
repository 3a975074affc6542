"""Receptive-field bank: small matched filters pooling the ratio map.

Each field is a box window in angle space (default 5 deg x 5 deg, 90 fields
tiling the field of view). Pooling emits, per field and frame, the weighted
mean r_bar and the weighted second moment r2_bar of the per-pixel ratio map.
The second moment is a distinct statistic: r2_bar >= r_bar^2 (Jensen), and
the velocity estimator's denominator needs the pooled second moment, not the
squared mean, for the closed-form identity over varied pixel depths to hold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .frontend import RatioMap, direction_validity, DEFAULT_CENTER_MASK_DEG
from .geometry import AngleGrid

DEFAULT_N_FIELDS = 90
DEFAULT_FIELD_DEG = 5.0

# documented lattice shapes (rows, cols) produced by build_bank's factor rule
LAYOUT_69X42_DEG = (6, 15)  # the 90-field default on a 69 x 42 deg field of view
LAYOUT_60X45_DEG = (9, 10)  # the 90-field default on a 60 x 45 deg field of view


@dataclass(frozen=True)
class ReceptiveField:
    """One pooling window: flat pixel indices and normalized box weights."""

    id: int
    pixel_indices: np.ndarray  # flat indices into the (H*W,) ratio map
    weights: np.ndarray  # same length, sum exactly 1 over the build-time support
    center_deg: tuple[float, float]  # (alpha_h, alpha_v) of the field center


@dataclass(frozen=True)
class FieldBank:
    fields: tuple[ReceptiveField, ...]
    layout: tuple[int, int]  # (rows, cols) of the placement lattice
    field_deg: float
    grid_shape: tuple[int, int]
    # sparse pooling operators, (n_fields, H*W); weight matrix and its binary support
    _wmat: sparse.csr_matrix
    _smat: sparse.csr_matrix

    @property
    def n_fields(self) -> int:
        return len(self.fields)


def _lattice_shape(n_fields: int, usable_w: float, usable_h: float) -> tuple[int, int]:
    """Pick rows*cols = n_fields whose aspect best matches the usable span."""
    target = np.log(max(usable_w, 1e-9) / max(usable_h, 1e-9))
    best = None
    for rows in range(1, n_fields + 1):
        if n_fields % rows:
            continue
        cols = n_fields // rows
        miss = abs(np.log(cols / rows) - target)
        if best is None or miss < best[0]:
            best = (miss, rows, cols)
    return best[1], best[2]


def build_bank(
    grid: AngleGrid,
    n_fields: int = DEFAULT_N_FIELDS,
    field_deg: float = DEFAULT_FIELD_DEG,
    center_mask_deg: float = DEFAULT_CENTER_MASK_DEG,
) -> FieldBank:
    """Deterministic lattice of box receptive fields covering the field of view.

    Field centers are evenly spaced over the span the field size leaves usable
    (FOV minus one field width per axis); the rows x cols factorization of
    n_fields is the one whose aspect ratio best matches that span. Placements
    whose support lies entirely inside the masked central cone are skipped.
    """
    if n_fields < 1:
        raise ValueError("n_fields must be >= 1")
    if field_deg <= 0:
        raise ValueError("field_deg must be positive")
    intr = grid.intrinsics
    hfov = np.rad2deg(intr.hfov_rad)
    vfov = np.rad2deg(intr.vfov_rad)
    fdeg = min(field_deg, hfov, vfov)
    usable_w = hfov - fdeg
    usable_h = vfov - fdeg
    rows, cols = _lattice_shape(n_fields, usable_w, usable_h)

    def centers(span: float, n: int) -> np.ndarray:
        if n == 1:
            return np.array([0.0])
        return np.linspace(-span / 2.0, span / 2.0, n)

    ch = centers(usable_w, cols)
    cv = centers(usable_h, rows)
    ah = np.rad2deg(grid.alpha_h)
    av = np.rad2deg(grid.alpha_v)
    valid_h, valid_v = direction_validity(grid, center_mask_deg)
    unmasked = (valid_h | valid_v).ravel()

    half = fdeg / 2.0
    fields = []
    rows_idx, cols_idx, vals = [], [], []
    fid = 0
    for cy in cv:
        for cx in ch:
            box = (np.abs(ah - cx) <= half) & (np.abs(av - cy) <= half)
            idx = np.flatnonzero(box.ravel() & unmasked)
            if idx.size == 0:
                continue  # fully masked or off-grid placement
            w = np.full(idx.size, 1.0 / idx.size)
            fields.append(ReceptiveField(id=fid, pixel_indices=idx, weights=w, center_deg=(cx, cy)))
            rows_idx.append(np.full(idx.size, fid))
            cols_idx.append(idx)
            vals.append(w)
            fid += 1
    if not fields:
        raise ValueError(
            f"no receptive field placement has unmasked support "
            f"(n_fields={n_fields}, field_deg={field_deg}, mask={center_mask_deg} deg)"
        )
    n_px = grid.shape[0] * grid.shape[1]
    ii = np.concatenate(rows_idx)
    jj = np.concatenate(cols_idx)
    wmat = sparse.csr_matrix((np.concatenate(vals), (ii, jj)), shape=(fid, n_px))
    smat = sparse.csr_matrix((np.ones(ii.size), (ii, jj)), shape=(fid, n_px))
    return FieldBank(
        fields=tuple(fields),
        layout=(rows, cols),
        field_deg=fdeg,
        grid_shape=grid.shape,
        _wmat=wmat,
        _smat=smat,
    )


@dataclass(frozen=True)
class PooledStats:
    field_id: int
    r_bar: float  # 1/s
    r2_bar: float  # 1/s^2
    t: float
    support_count: int  # unmasked pixels that contributed this frame


def pool_arrays(ratio: RatioMap, bank: FieldBank):
    """Vectorized pooling: (r_bar, r2_bar, support_count, emitted) arrays.

    Weights renormalize over the unmasked part of each field's support every
    frame, keeping r_bar an unbiased mean when the mask clips a field edge.
    Fields with zero unmasked support are marked not emitted.
    """
    if ratio.r.shape != bank.grid_shape:
        raise ValueError("ratio map does not match the bank's grid")
    m = ratio.mask.ravel().astype(float)
    rm = np.where(ratio.mask, ratio.r, 0.0).ravel()
    wm = bank._wmat @ m
    num1 = bank._wmat @ rm
    num2 = bank._wmat @ (rm * rm)
    emitted = wm > 0
    safe = np.where(emitted, wm, 1.0)
    r_bar = np.where(emitted, num1 / safe, 0.0)
    r2_bar = np.where(emitted, num2 / safe, 0.0)
    support = (bank._smat @ m).astype(int)
    return r_bar, r2_bar, support, emitted


def pool(ratio: RatioMap, bank: FieldBank) -> list[PooledStats]:
    """PooledStats for every field with unmasked support this frame."""
    r_bar, r2_bar, support, emitted = pool_arrays(ratio, bank)
    return [
        PooledStats(
            field_id=k,
            r_bar=float(r_bar[k]),
            r2_bar=float(r2_bar[k]),
            t=ratio.t,
            support_count=int(support[k]),
        )
        for k in np.flatnonzero(emitted)
    ]
