"""Grid geometry and the structured-latent data model.

Axis convention: arrays are indexed ``[z, y, x]`` (``d, h, w``) with ``z`` the
vertical axis. Octant ``j`` packs its half-space bits as
``j = bx + 2*by + 4*bz``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError

_INDEX_LIMIT = np.iinfo(np.int64).max


@dataclass(frozen=True)
class GridDims:
    d: int
    h: int
    w: int
    c: int = 1

    def __post_init__(self):
        for name in ("d", "h", "w", "c"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise DataError(f"grid dimension {name}={v!r} must be a positive integer")
        if self.d * self.h * self.w * self.c > _INDEX_LIMIT:
            raise DataError("grid too large for the index range")

    @property
    def spatial(self) -> tuple[int, int, int]:
        return (self.d, self.h, self.w)

    @property
    def voxels(self) -> int:
        return self.d * self.h * self.w

    def with_channels(self, c: int) -> "GridDims":
        return GridDims(self.d, self.h, self.w, c)


@dataclass(frozen=True)
class DenseLatentGrid:
    """Dense ``(d, h, w, c)`` field."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DataError(f"dense latent must be 4-D (d,h,w,c), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("dense latent contains non-finite values")

    @property
    def dims(self) -> GridDims:
        return GridDims(*self.data.shape)


def _linear_keys(positions: np.ndarray, spatial: tuple[int, int, int]) -> np.ndarray:
    _, h, w = spatial
    p = positions.astype(np.int64)
    return (p[:, 0] * h + p[:, 1]) * w + p[:, 2]


@dataclass(frozen=True)
class SparseLatent:
    """Set of ``(position, feature)`` pairs on a ``d x h x w`` lattice."""

    dims: GridDims
    positions: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.features)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(0, self.dims.c)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feats)
        if feats.ndim != 2 or feats.shape[1] != self.dims.c:
            raise DataError(f"features must be (L, {self.dims.c}), got {feats.shape}")
        if len(pos) != len(feats):
            raise DataError(f"{len(pos)} positions but {len(feats)} feature vectors")
        if len(pos):
            lo = pos.min(axis=0)
            hi = pos.max(axis=0)
            if (lo < 0).any() or (hi >= np.array(self.dims.spatial)).any():
                raise DataError(f"position out of bounds for grid {self.dims.spatial}")
            keys = _linear_keys(pos, self.dims.spatial)
            if len(np.unique(keys)) != len(keys):
                raise DataError("sparse latent has duplicate positions")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls, dims: GridDims, dtype=np.float64) -> "SparseLatent":
        return cls(dims, np.zeros((0, 3), np.int64), np.zeros((0, dims.c), dtype))

    @classmethod
    def from_dense(cls, dense: np.ndarray, active: np.ndarray) -> "SparseLatent":
        pos = np.argwhere(active)
        return cls(GridDims(*dense.shape), pos, dense[active])

    def keys(self) -> np.ndarray:
        return _linear_keys(self.positions, self.dims.spatial)

    def canonical(self) -> "SparseLatent":
        """Copy sorted lexicographically by position (z, then y, then x)."""
        order = np.argsort(self.keys(), kind="stable")
        return SparseLatent(self.dims, self.positions[order], self.features[order])

    def same_as(self, other: "SparseLatent") -> bool:
        """Set equality on (position, feature) pairs, bit-exact features."""
        if self.dims != other.dims or len(self) != len(other):
            return False
        a, b = self.canonical(), other.canonical()
        return bool(np.array_equal(a.positions, b.positions) and np.array_equal(a.features, b.features))

    def to_dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Scatter into a dense array with zeros at inactive voxels; also return the mask."""
        dense = np.zeros(self.dims.spatial + (self.dims.c,), dtype=self.features.dtype)
        mask = np.zeros(self.dims.spatial, dtype=bool)
        if len(self):
            z, y, x = self.positions.T
            dense[z, y, x] = self.features
            mask[z, y, x] = True
        return dense, mask

    def lookup(self, positions: np.ndarray) -> np.ndarray:
        """Row index of each query position, or -1 when absent."""
        q = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(q), -1, dtype=np.int64)
        if not len(self) or not len(q):
            return out
        spatial = np.array(self.dims.spatial)
        inside = np.all((q >= 0) & (q < spatial), axis=1)
        keys = self.keys()
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        qk = _linear_keys(q[inside], self.dims.spatial)
        slot = np.searchsorted(sorted_keys, qk)
        slot_c = np.minimum(slot, len(sorted_keys) - 1)
        hit = sorted_keys[slot_c] == qk
        idx = np.where(hit, order[slot_c], -1)
        out[inside] = idx
        return out


@dataclass(frozen=True)
class OccupancyField:
    values: np.ndarray
    threshold: float = 0.0

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DataError(f"occupancy values must be 3-D, got {self.values.shape}")

    @property
    def dims(self) -> GridDims:
        return GridDims(*self.values.shape, 1)

    @property
    def active(self) -> np.ndarray:
        return self.values > self.threshold

    def positions(self) -> np.ndarray:
        return np.argwhere(self.active)

    def count(self) -> int:
        return int(self.active.sum())


@dataclass(frozen=True)
class SegmentMap:
    """2-D label raster with a prompt per label."""

    labels: np.ndarray
    prompts: dict

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.size == 0:
            raise DataError(f"segment map raster must be a non-empty 2-D array, got {lab.shape}")
        object.__setattr__(self, "labels", lab.astype(np.int64))
        missing = sorted(set(np.unique(lab).tolist()) - set(self.prompts))
        if missing:
            raise DataError(f"labels without a prompt entry: {missing}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def label_ids(self) -> list[int]:
        return sorted(np.unique(self.labels).tolist())

    @property
    def K(self) -> int:
        return len(self.label_ids)


@dataclass(frozen=True)
class MaskVolume:
    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise DataError(f"mask volume must be 3-D, got {self.weights.shape}")
        if self.weights.size and (self.weights.min() < 0 or self.weights.max() > 1):
            raise DataError("mask weights must lie in [0, 1]")

    @property
    def dims(self) -> GridDims:
        return GridDims(*self.weights.shape, 1)


class Window(NamedTuple):
    origin: tuple[int, int, int]
    center: tuple[float, float, float]


@dataclass(frozen=True)
class WindowPlan:
    dims: GridDims
    window_size: int
    stride: int
    windows: tuple[Window, ...] = field(default_factory=tuple)

    def slices(self, k: int) -> tuple[slice, slice, slice]:
        o = self.windows[k].origin
        n = self.window_size
        return (slice(o[0], o[0] + n), slice(o[1], o[1] + n), slice(o[2], o[2] + n))

    def boundary_planes(self) -> list[list[int]]:
        """Per axis, the sorted plane coordinates p (pairs (p-1, p)) where a window starts or ends."""
        planes = []
        for axis, size in enumerate(self.dims.spatial):
            cuts = set()
            for win in self.windows:
                o = win.origin[axis]
                cuts.update((o, o + self.window_size))
            planes.append(sorted(p for p in cuts if 0 < p < size))
        return planes


def _axis_origins(size: int, window: int, stride: int) -> list[int]:
    origins = []
    o = 0
    while True:
        clamped = min(o, size - window)
        if not origins or clamped != origins[-1]:
            origins.append(clamped)
        if o + window >= size:
            break
        o += stride
    return origins


def build_window_plan(dims: GridDims, window_size: int = 64, stride: int | None = None) -> WindowPlan:
    """Overlapping cubic windows covering ``dims``; the last window per axis is clamped to the boundary."""
    if stride is None:
        stride = max(1, window_size // 2)
    if window_size < 1:
        raise DataError("window_size must be positive")
    if not 1 <= stride <= window_size:
        raise DataError(f"stride {stride} must lie in [1, window_size={window_size}]")
    for name, size in zip("dhw", dims.spatial):
        if size < window_size:
            raise DataError(f"axis {name} has size {size} < window_size {window_size}")
    per_axis = [_axis_origins(size, window_size, stride) for size in dims.spatial]
    half = (window_size - 1) / 2.0
    windows = tuple(
        Window((z, y, x), (z + half, y + half, x + half))
        for z in per_axis[0]
        for y in per_axis[1]
        for x in per_axis[2]
    )
    return WindowPlan(dims, window_size, stride, windows)


def gaussian_weight(offset, sigma: float) -> np.ndarray:
    """exp(-|o|^2 / (2 sigma^2)) for offsets of shape (..., 3)."""
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    o = np.asarray(offset, dtype=np.float64)
    return np.exp(-np.sum(o * o, axis=-1) / (2.0 * sigma * sigma))


def gaussian_window_weights(window_size: int, sigma: float) -> np.ndarray:
    """Weight block for offsets from the geometric window center ``(n-1)/2``."""
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    r = np.arange(window_size, dtype=np.float64) - (window_size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g[:, None, None] * g[None, :, None] * g[None, None, :]


def extrude_segment_map(seg: SegmentMap, dims: GridDims) -> list[MaskVolume]:
    """Lift the 2-D raster to one hard mask per label (ordered as ``seg.label_ids``).

    Each raster column is extruded through the full vertical axis; the raster is
    resampled to ``(h, w)`` by nearest neighbour.
    """
    iy = (np.arange(dims.h) * seg.height) // dims.h
    ix = (np.arange(dims.w) * seg.width) // dims.w
    plane = seg.labels[np.ix_(iy, ix)]
    masks = []
    for lab in seg.label_ids:
        col = (plane == lab).astype(np.float64)
        masks.append(MaskVolume(np.broadcast_to(col, dims.spatial).copy()))
    return masks


def smooth_mask(mask: MaskVolume, sigma: float) -> MaskVolume:
    """Blur with a normalized Gaussian truncated at radius ceil(3 sigma), reflective borders."""
    if sigma < 0:
        raise DataError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return mask
    out = ndimage.gaussian_filter(
        mask.weights.astype(np.float64), sigma=sigma, mode="reflect", radius=int(math.ceil(3 * sigma))
    )
    return MaskVolume(np.clip(out, 0.0, 1.0))


def _trilinear_corners(dims: GridDims, q: np.ndarray):
    spatial = np.array(dims.spatial)
    if q.size and ((q < 0).any() or (q > spatial - 1).any()):
        raise DataError(f"trilinear query outside grid bounds [0, {tuple(spatial - 1)}]")
    i0 = np.clip(np.floor(q).astype(np.int64), 0, np.maximum(spatial - 2, 0))
    frac = q - i0
    i1 = np.minimum(i0 + 1, spatial - 1)
    return i0, i1, frac


def trilinear_sample_many(s: SparseLatent, queries) -> np.ndarray:
    """Trilinear blend of the 8 cell corners for each query; absent corners contribute zero."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    i0, i1, f = _trilinear_corners(s.dims, q)
    out = np.zeros((len(q), s.dims.c), dtype=np.float64)
    for bz in (0, 1):
        for by in (0, 1):
            for bx in (0, 1):
                corner = np.stack(
                    [(i1 if b else i0)[:, a] for a, b in enumerate((bz, by, bx))], axis=1
                )
                wgt = np.ones(len(q))
                for a, b in enumerate((bz, by, bx)):
                    wgt = wgt * (f[:, a] if b else 1.0 - f[:, a])
                row = s.lookup(corner)
                hit = row >= 0
                out[hit] += wgt[hit, None] * s.features[row[hit]]
    return out


def trilinear_sample_sparse(s: SparseLatent, query) -> np.ndarray:
    return trilinear_sample_many(s, np.asarray(query, dtype=np.float64)[None])[0]


# --- octants -----------------------------------------------------------------


class OctantIndex(int):
    """Octant id ``j = bx + 2*by + 4*bz``."""

    def __new__(cls, j: int):
        if not 0 <= int(j) < 8:
            raise DataError(f"octant index {j} outside [0, 8)")
        return super().__new__(cls, int(j))

    @property
    def bits(self) -> tuple[int, int, int]:
        """Half-space bits in array-axis order (bz, by, bx)."""
        return ((self >> 2) & 1, (self >> 1) & 1, self & 1)

    @classmethod
    def from_bits(cls, bz: int, by: int, bx: int) -> "OctantIndex":
        return cls(bx + 2 * by + 4 * bz)


def _half_dims(dims: GridDims) -> GridDims:
    for name, size in zip("dhw", dims.spatial):
        if size % 2:
            raise DataError(f"axis {name} has odd size {size}; octant split needs even dims")
    return GridDims(dims.d // 2, dims.h // 2, dims.w // 2, dims.c)


def split_octants(s: SparseLatent) -> list[SparseLatent]:
    half = _half_dims(s.dims)
    hs = np.array(half.spatial)
    bits = (s.positions >= hs).astype(np.int64)
    j = bits[:, 2] + 2 * bits[:, 1] + 4 * bits[:, 0]
    parts = []
    for k in range(8):
        sel = j == k
        parts.append(SparseLatent(half, s.positions[sel] - bits[sel] * hs, s.features[sel]))
    return parts


def merge_octants(parts: Sequence[SparseLatent]) -> SparseLatent:
    if len(parts) != 8:
        raise DataError(f"merge_octants needs 8 parts, got {len(parts)}")
    half = parts[0].dims
    for p in parts:
        if p.dims != half:
            raise DataError(f"octant dims mismatch: {p.dims} vs {half}")
    hs = np.array(half.spatial)
    pos, feats = [], []
    for k, p in enumerate(parts):
        pos.append(p.positions + np.array(OctantIndex(k).bits) * hs)
        feats.append(p.features)
    full = GridDims(half.d * 2, half.h * 2, half.w * 2, half.c)
    dtype = np.result_type(*[f.dtype for f in feats])
    merged = SparseLatent(full, np.concatenate(pos), np.concatenate(feats).astype(dtype, copy=False))
    return merged.canonical()


def truncate_latent(parent: SparseLatent, j: int) -> SparseLatent:
    """The part of ``parent`` inside octant ``j``, re-based to the octant origin."""
    j = OctantIndex(j)
    half = _half_dims(parent.dims)
    hs = np.array(half.spatial)
    lo = np.array(j.bits) * hs
    sel = np.all((parent.positions >= lo) & (parent.positions < lo + hs), axis=1)
    return SparseLatent(half, parent.positions[sel] - lo, parent.features[sel])


class Direction(NamedTuple):
    """Face direction of a neighbour relative to the target: array axis (0=z, 1=y, 2=x) and sign."""

    axis: int
    sign: int


# x, y, z order; x is array axis 2 and bit 0
_AXIS_ORDER = ((2, 0), (1, 1), (0, 2))


def adjacent_octants(j: int) -> list[tuple[Direction, OctantIndex]]:
    """The three face-adjacent siblings of octant ``j`` in x, y, z order."""
    j = OctantIndex(j)
    out = []
    for axis, bit in _AXIS_ORDER:
        nb = OctantIndex(j ^ (1 << bit))
        sign = -1 if (j >> bit) & 1 else 1
        out.append((Direction(axis, sign), nb))
    return out


def gather_adjacent(siblings: dict, j: int, count_limit: int = 3) -> list[tuple[Direction, SparseLatent]]:
    if not 0 <= count_limit <= 3:
        raise DataError(f"count_limit {count_limit} outside [0, 3]")
    out = []
    for direction, nb in adjacent_octants(j):
        if nb in siblings:
            out.append((direction, siblings[nb]))
    return out[:count_limit]
