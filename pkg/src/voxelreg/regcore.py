"""Discrete displacement-space optimization core.

The displacement search works on a quantized candidate set: every voxel
may move by any 3-vector whose components lie in {0, +-q, +-2q, ...,
+-l_max}. For each candidate d, a dense cost map holds the per-voxel
feature dissimilarity (sum of absolute differences) between the fixed
volume at x and the moving volume at x + d; the stack of all cost maps is
the cost volume. Smoothness is realized by summing costs over a spatial
patch (``aggregate_costs``) and by Gaussian-smoothing each candidate's
cost map (``regularize_dsv``) before the per-voxel argmin
(``winner_takes_all``).

All operations are pure functions over immutable inputs and are
bit-deterministic: the cost volume is label-major (one contiguous 3-D map
per candidate), SAD accumulates in channel order, and argmin ties resolve
by smallest L1 displacement, then lexicographic (dz, dy, dx), so the zero
displacement always wins a tie against any other candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from voxelreg.volume import (
    DisplacementField,
    FeatureVolume,
    VolumeHeader,
    _trilinear_zyx,
)


@dataclass(frozen=True)
class DisplacementSet:
    """The quantized displacement candidates, in canonical order.

    ``displacements`` has shape (count, 3) with rows (dx, dy, dz),
    ordered lexicographically by (dz, dy, dx) ascending. The set is the
    full Cartesian cube, contains zero exactly once and is closed under
    negation.
    """

    q: float
    l_max: float
    displacements: np.ndarray

    def __post_init__(self):
        disp = np.ascontiguousarray(np.asarray(self.displacements, dtype=np.float64))
        disp.setflags(write=False)
        object.__setattr__(self, "displacements", disp)

    @property
    def count(self) -> int:
        return self.displacements.shape[0]

    def priority_order(self) -> np.ndarray:
        """Label indices sorted by the tie-break rule: L1 norm, then (dz, dy, dx)."""
        d = self.displacements
        l1 = np.abs(d).sum(axis=1)
        return np.lexsort((d[:, 0], d[:, 1], d[:, 2], l1))


def build_displacement_set(q: float, l_max: float) -> DisplacementSet:
    """Cartesian cube of per-axis steps {0, +-q, ..., +-l_max}.

    ``l_max`` must be an integer multiple of ``q``; the result has
    (2k + 1)^3 candidates for k = l_max / q.
    """
    if q <= 0:
        raise ValueError(f"q must be > 0, got {q}")
    if l_max < 0:
        raise ValueError(f"l_max must be >= 0, got {l_max}")
    k = l_max / q
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"l_max ({l_max}) must be an integer multiple of q ({q})")
    k = int(round(k))
    steps = np.arange(-k, k + 1, dtype=np.float64) * q
    dz, dy, dx = np.meshgrid(steps, steps, steps, indexing="ij")
    disp = np.column_stack([dx.ravel(), dy.ravel(), dz.ravel()])
    return DisplacementSet(q=float(q), l_max=float(l_max), displacements=disp)


@dataclass(frozen=True)
class CostVolume:
    """Per-voxel, per-candidate similarity costs, label-major.

    ``costs`` has shape (label_count, z, y, x), float64, all entries
    finite and non-negative.
    """

    dims: tuple[int, int, int]  # (x, y, z) of the fixed grid
    costs: np.ndarray

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=np.float64)
        expected = (costs.shape[0], self.dims[2], self.dims[1], self.dims[0])
        if costs.shape != expected:
            raise ValueError(f"costs shape {costs.shape} != expected {expected}")
        if not np.isfinite(costs).all() or costs.min(initial=0.0) < 0.0:
            raise ValueError("costs must be finite and non-negative")
        costs = np.ascontiguousarray(costs)
        costs.setflags(write=False)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def label_count(self) -> int:
        return self.costs.shape[0]


@dataclass(frozen=True)
class RegParams:
    """One level's search/regularization parameters.

    ``smooth_sigma`` defaults to sqrt(alpha): the quadratic field penalty
    is realized approximately by Gaussian-smoothing each candidate's cost
    map before the argmin.
    """

    q: float = 2.0
    l_max: float = 8.0
    alpha: float = 2.0
    patch_radius: int = 2
    smooth_sigma: float | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")
        if self.smooth_sigma is None:
            object.__setattr__(self, "smooth_sigma", float(np.sqrt(self.alpha)))


def sad(a, b) -> float:
    """Sum of absolute differences, accumulated in channel order."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"channel count mismatch: {a.shape} vs {b.shape}")
    total = 0.0
    for av, bv in zip(a.tolist(), b.tolist()):
        total += abs(av - bv)
    return total


def _check_feature_pair(f_fixed: FeatureVolume, f_moving: FeatureVolume):
    if f_fixed.dims != f_moving.dims:
        raise ValueError(f"dims mismatch: {f_fixed.dims} vs {f_moving.dims}")
    if f_fixed.channels != f_moving.channels:
        raise ValueError(f"channel mismatch: {f_fixed.channels} vs {f_moving.channels}")


def _shift_clamped_4d(data: np.ndarray, dz: int, dy: int, dx: int) -> np.ndarray:
    nz, ny, nx = data.shape[:3]
    zi = np.clip(np.arange(nz) + dz, 0, nz - 1)
    yi = np.clip(np.arange(ny) + dy, 0, ny - 1)
    xi = np.clip(np.arange(nx) + dx, 0, nx - 1)
    return data[np.ix_(zi, yi, xi)]


def _sample_shifted(moving: np.ndarray, d: np.ndarray) -> np.ndarray:
    """moving(x + d) for a constant displacement d = (dx, dy, dz), clamped.

    Integer displacements use direct lookup (bit-exact); fractional ones
    blend the 8 integer-shifted corners with trilinear weights, channel
    values interpolated independently.
    """
    dx, dy, dz = float(d[0]), float(d[1]), float(d[2])
    if dx.is_integer() and dy.is_integer() and dz.is_integer():
        return _shift_clamped_4d(moving, int(dz), int(dy), int(dx))
    bx, by, bz = int(np.floor(dx)), int(np.floor(dy)), int(np.floor(dz))
    fx, fy, fz = dx - bx, dy - by, dz - bz
    out = np.zeros(moving.shape, dtype=np.float64)
    for cz, wz in ((0, 1.0 - fz), (1, fz)):
        for cy, wy in ((0, 1.0 - fy), (1, fy)):
            for cx, wx in ((0, 1.0 - fx), (1, fx)):
                w = wz * wy * wx
                if w == 0.0:
                    continue
                out += w * _shift_clamped_4d(moving, bz + cz, by + cy, bx + cx)
    return out


def _label_cost_map(fixed64: np.ndarray, moving64: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Per-voxel SAD between fixed(x) and moving(x + d), shape (z, y, x)."""
    shifted = _sample_shifted(moving64, d)
    return np.abs(fixed64 - shifted).sum(axis=-1)


def build_dsv(f_fixed: FeatureVolume, f_moving: FeatureVolume, disp: DisplacementSet) -> CostVolume:
    """Dense cost volume: costs[d][x] = SAD(fixed(x), moving(x + d))."""
    _check_feature_pair(f_fixed, f_moving)
    fixed64 = f_fixed.data.astype(np.float64)
    moving64 = f_moving.data.astype(np.float64)
    nz, ny, nx = fixed64.shape[:3]
    costs = np.empty((disp.count, nz, ny, nx), dtype=np.float64)
    for li in range(disp.count):
        costs[li] = _label_cost_map(fixed64, moving64, disp.displacements[li])
    return CostVolume(dims=f_fixed.dims, costs=costs)


def _box_sum_map(cost_map: np.ndarray, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    return ndimage.uniform_filter(cost_map, size=size, mode="nearest") * float(size**3)


def aggregate_costs(dsv: CostVolume, patch_radius: int) -> CostVolume:
    """Box-sum each candidate's cost map over the (2r+1)^3 window.

    Window positions past the border are clamped (edge replication);
    radius 0 is the identity.
    """
    if patch_radius < 0:
        raise ValueError("patch_radius must be >= 0")
    if patch_radius == 0:
        return dsv
    out = np.empty_like(dsv.costs)
    for li in range(dsv.label_count):
        out[li] = _box_sum_map(dsv.costs[li], patch_radius)
    # rolling sums can leave tiny negative residues on all-zero maps
    np.maximum(out, 0.0, out=out)
    return CostVolume(dims=dsv.dims, costs=out)


def _smooth_map(cost_map: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(cost_map, sigma=sigma, mode="nearest")


def regularize_dsv(dsv: CostVolume, smooth_sigma: float) -> CostVolume:
    """Gaussian-smooth each candidate's cost map; sigma 0 is the identity."""
    if smooth_sigma < 0:
        raise ValueError("smooth_sigma must be >= 0")
    if smooth_sigma == 0:
        return dsv
    out = np.empty_like(dsv.costs)
    for li in range(dsv.label_count):
        out[li] = _smooth_map(dsv.costs[li], smooth_sigma)
    np.maximum(out, 0.0, out=out)
    return CostVolume(dims=dsv.dims, costs=out)


def winner_takes_all(dsv: CostVolume, disp: DisplacementSet) -> DisplacementField:
    """Per-voxel argmin over candidates with deterministic tie-breaking.

    Candidates are scanned in priority order (smallest L1 displacement
    first, then lexicographic (dz, dy, dx)), so among equal costs the
    smallest displacement wins and self-similar inputs yield the zero
    field.
    """
    if dsv.label_count != disp.count:
        raise ValueError(f"label_count {dsv.label_count} != |displacements| {disp.count}")
    order = disp.priority_order()
    best = np.argmin(dsv.costs[order], axis=0)
    field = disp.displacements[order][best].astype(np.float32)
    header = VolumeHeader(dsv.dims, channels=3, dtype="float32")
    return DisplacementField(header, field)


def energy(f_fixed: FeatureVolume, f_moving: FeatureVolume, field: DisplacementField, alpha: float) -> float:
    """Diagnostic objective: total SAD under the field plus alpha * |grad u|^2.

    The data term warps the moving features by the field (trilinear,
    clamped) and sums per-voxel SAD; the smoothness term sums squared
    forward differences of each field component over each axis (no
    contribution where the forward neighbor falls outside). The winner
    field at alpha = 0, patch_radius = 0 can never exceed the zero-field
    energy.
    """
    _check_feature_pair(f_fixed, f_moving)
    if field.dims != f_fixed.dims:
        raise ValueError(f"field dims {field.dims} != volume dims {f_fixed.dims}")
    nz, ny, nx = f_fixed.data.shape[:3]
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    u = field.data.astype(np.float64)
    warped = _trilinear_zyx(
        f_moving.data, zz + u[..., 2], yy + u[..., 1], xx + u[..., 0]
    )
    data_term = float(np.abs(f_fixed.data.astype(np.float64) - warped).sum())

    grad_term = 0.0
    for c in range(3):
        comp = u[..., c]
        grad_term += float((np.diff(comp, axis=0) ** 2).sum())
        grad_term += float((np.diff(comp, axis=1) ** 2).sum())
        grad_term += float((np.diff(comp, axis=2) ** 2).sum())
    return data_term + float(alpha) * grad_term
