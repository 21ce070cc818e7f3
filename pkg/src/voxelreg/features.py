"""Per-voxel feature descriptors and intensity harmonization.

Descriptors all return a :class:`~voxelreg.volume.FeatureVolume`:

* ``normalize_intensity`` - percentile-rescaled raw intensity (1 channel).
* ``edge_features`` - gradient magnitude of the [0, 1]-normalized volume
  (1 channel).
* ``ssc_features`` - a 12-channel self-similarity descriptor built from
  patch distances between the edge-adjacent pairs of a voxel's
  6-neighborhood; invariant to affine intensity changes.
* ``load_external_features`` - ingestion of externally produced
  multi-channel feature volumes (e.g. network outputs) in the raw+JSON
  format.

``intensity_standardize`` remaps one volume's intensity scale onto a
reference via decile-landmark piecewise-linear matching over foreground
voxels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from voxelreg.volume import (
    FeatureVolume,
    ScalarVolume,
    VolumeHeader,
    load_volume,
)


class DegenerateInputWarning(UserWarning):
    """Raised as a warning when an input has no usable intensity spread."""


def _feature_header(vol_header: VolumeHeader, channels: int) -> VolumeHeader:
    return VolumeHeader(vol_header.dims, vol_header.spacing, channels, "float32")


# ---------------------------------------------------------------------------
# Intensity features
# ---------------------------------------------------------------------------

def normalize_intensity(vol: ScalarVolume, p_low: float = 1.0, p_high: float = 99.0) -> FeatureVolume:
    """Rescale so the p_low percentile maps to 0 and p_high to 1, clipped.

    A volume with zero percentile spread has no usable contrast; it maps
    to all 0.5 and a :class:`DegenerateInputWarning` is emitted.
    """
    if not (0.0 <= p_low < p_high <= 100.0):
        raise ValueError(f"need 0 <= p_low < p_high <= 100, got {p_low}, {p_high}")
    data = vol.data.astype(np.float64)
    lo, hi = np.percentile(data, [p_low, p_high])
    if hi <= lo:
        warnings.warn(
            "constant intensity volume: normalization is degenerate, returning 0.5",
            DegenerateInputWarning,
        )
        out = np.full(data.shape, 0.5, dtype=np.float32)
    else:
        out = np.clip((data - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
    return FeatureVolume(_feature_header(vol.header, 1), out[..., np.newaxis])


@dataclass(frozen=True)
class StandardizationMap:
    """Piecewise-linear intensity map between two decile landmark sets.

    Both landmark arrays hold the 0th..100th percentiles in steps of 10
    (11 values) and must be non-decreasing. Outside the landmark range
    the end segments are extended linearly, so mapping a volume onto its
    own landmarks is the identity.
    """

    source_landmarks: np.ndarray
    target_landmarks: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.source_landmarks, dtype=np.float64)
        dst = np.asarray(self.target_landmarks, dtype=np.float64)
        if src.shape != dst.shape or src.ndim != 1 or src.size < 2:
            raise ValueError("landmark arrays must be matching 1-D arrays of length >= 2")
        if np.any(np.diff(src) < 0) or np.any(np.diff(dst) < 0):
            raise ValueError("landmark sequences must be non-decreasing")
        # collapse duplicate source landmarks so the map stays a function
        keep = np.concatenate(([True], np.diff(src) > 0))
        src, dst = src[keep], dst[keep]
        if src.size < 2:
            raise ValueError("degenerate landmarks: source has no spread")
        object.__setattr__(self, "source_landmarks", src)
        object.__setattr__(self, "target_landmarks", dst)

    def apply(self, values: np.ndarray) -> np.ndarray:
        src, dst = self.source_landmarks, self.target_landmarks
        out = np.interp(values, src, dst)
        lo_slope = (dst[1] - dst[0]) / (src[1] - src[0])
        hi_slope = (dst[-1] - dst[-2]) / (src[-1] - src[-2])
        below = values < src[0]
        above = values > src[-1]
        out = np.where(below, dst[0] + (values - src[0]) * lo_slope, out)
        out = np.where(above, dst[-1] + (values - src[-1]) * hi_slope, out)
        return out


_DECILES = np.arange(0.0, 101.0, 10.0)


def _foreground(data: np.ndarray, percentile: float = 5.0) -> np.ndarray:
    thresh = np.percentile(data, percentile)
    return data[data > thresh]


def build_standardization_map(
    vol: ScalarVolume, reference: ScalarVolume, foreground_percentile: float = 5.0
) -> StandardizationMap:
    """Decile landmarks of vol's foreground mapped onto the reference's."""
    src_fg = _foreground(vol.data.astype(np.float64), foreground_percentile)
    dst_fg = _foreground(reference.data.astype(np.float64), foreground_percentile)
    if src_fg.size == 0 or np.ptp(src_fg) == 0.0:
        raise ValueError("input volume is constant over foreground")
    if dst_fg.size == 0 or np.ptp(dst_fg) == 0.0:
        raise ValueError("reference volume is constant over foreground")
    return StandardizationMap(
        np.percentile(src_fg, _DECILES), np.percentile(dst_fg, _DECILES)
    )


def intensity_standardize(vol: ScalarVolume, reference: ScalarVolume) -> ScalarVolume:
    """Remap vol's intensities onto the reference's decile landmarks."""
    smap = build_standardization_map(vol, reference)
    out = smap.apply(vol.data.astype(np.float64))
    return ScalarVolume(vol.header, out.astype(np.float32))


# ---------------------------------------------------------------------------
# Edge features
# ---------------------------------------------------------------------------

def edge_features(vol: ScalarVolume) -> FeatureVolume:
    """Gradient magnitude of the min-max [0, 1]-normalized volume.

    Central differences in the interior, one-sided at borders (unit voxel
    spacing). A constant volume yields all zeros.
    """
    if min(vol.dims) < 3:
        raise ValueError(f"edge features need dims >= 3 per axis, got {vol.dims}")
    data = vol.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi > lo:
        data = (data - lo) / (hi - lo)
    gz, gy, gx = np.gradient(data, edge_order=1)
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    return FeatureVolume(_feature_header(vol.header, 1), mag.astype(np.float32)[..., np.newaxis])


# ---------------------------------------------------------------------------
# Self-similarity context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SscParams:
    """Self-similarity descriptor parameters; channel count is fixed at 12."""

    patch_radius: int = 1
    noise_floor: float = 1e-6
    channel_count: int = field(default=12, init=False)

    def __post_init__(self):
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")
        if self.noise_floor <= 0:
            raise ValueError("noise_floor must be > 0")


# 6-neighborhood offsets (dz, dy, dx), sorted lexicographically.
SIX_NEIGHBORHOOD = (
    (-1, 0, 0),
    (0, -1, 0),
    (0, 0, -1),
    (0, 0, 1),
    (0, 1, 0),
    (1, 0, 0),
)

# The 12 edge-adjacent offset pairs: all (i < j) pairs at squared distance 2,
# i.e. every pair except the three opposite ones.
SSC_PAIRS = tuple(
    (i, j)
    for i in range(6)
    for j in range(i + 1, 6)
    if sum((a - b) ** 2 for a, b in zip(SIX_NEIGHBORHOOD[i], SIX_NEIGHBORHOOD[j])) == 2
)
assert len(SSC_PAIRS) == 12


def _shift_clamped(data: np.ndarray, offset) -> np.ndarray:
    """data[z+dz, y+dy, x+dx] with indices clamped to the volume."""
    dz, dy, dx = offset
    nz, ny, nx = data.shape
    zi = np.clip(np.arange(nz) + dz, 0, nz - 1)
    yi = np.clip(np.arange(ny) + dy, 0, ny - 1)
    xi = np.clip(np.arange(nx) + dx, 0, nx - 1)
    return data[np.ix_(zi, yi, xi)]


def _box_sum(data: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^3 window around each voxel, edges replicated."""
    if radius == 0:
        return data
    size = 2 * radius + 1
    return ndimage.uniform_filter(data, size=size, mode="nearest") * float(size**3)


def ssc_features(vol: ScalarVolume, params: SscParams = SscParams()) -> FeatureVolume:
    """12-channel self-similarity descriptor.

    For each voxel x and each edge-adjacent pair (o_i, o_j) of its
    6-neighborhood, the patch SSD

        D_k(x) = sum_p (v(x + p + o_i) - v(x + p + o_j))^2

    is taken over the (2r+1)^3 patch offsets p, with every lookup clamped
    to the volume (edge replication, applied at the shift stage and again
    at the patch-sum stage). Channels are exp(-D_k(x) / m(x)) where m(x)
    is the mean of the 12 distances floored at ``noise_floor``, so all
    outputs lie in (0, 1] and the descriptor is invariant to affine
    intensity changes a*v + b with a > 0.
    """
    min_dim = 2 * (params.patch_radius + 1) + 1
    if min(vol.dims) < min_dim:
        raise ValueError(f"ssc needs dims >= {min_dim} per axis, got {vol.dims}")
    data = vol.data.astype(np.float64)
    shifted = [_shift_clamped(data, off) for off in SIX_NEIGHBORHOOD]

    dists = np.empty((12,) + data.shape, dtype=np.float64)
    for k, (i, j) in enumerate(SSC_PAIRS):
        diff = shifted[i] - shifted[j]
        dists[k] = _box_sum(diff * diff, params.patch_radius)

    mean_dist = np.maximum(dists.mean(axis=0), params.noise_floor)
    channels = np.exp(-dists / mean_dist)
    out = np.moveaxis(channels, 0, -1).astype(np.float32)
    return FeatureVolume(_feature_header(vol.header, 12), out)


# ---------------------------------------------------------------------------
# External (learned) features
# ---------------------------------------------------------------------------

def zscore_channels(fv: FeatureVolume) -> FeatureVolume:
    """Rescale each channel to zero mean, unit variance.

    Channels with zero variance are centered only; useful when externally
    produced channels carry arbitrary scales (the SAD similarity is
    scale-sensitive).
    """
    data = fv.data.astype(np.float64)
    flat = data.reshape(-1, fv.channels)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    out = ((flat - mean) / std).reshape(data.shape).astype(np.float32)
    return FeatureVolume(fv.header, out)


def load_external_features(path, zscore: bool = False) -> FeatureVolume:
    """Load an externally produced FeatureVolume from the raw+JSON format.

    Values are trusted as-is unless ``zscore`` requests per-channel
    rescaling. Non-finite payloads are rejected at load time; dimension
    agreement with the paired image is checked where the features are
    consumed.
    """
    fv = load_volume(path, kind="feature")
    if zscore:
        fv = zscore_channels(fv)
    return fv
