"""Seam discontinuity, per-region statistics and fusion-normalization probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .flowmodel import decode_occupancy
from .fusion import SamplerConfig, _resolve_conditions, _window_blend, fuse_segment_velocities, sample_latent_fusion
from .lattice import (
    DenseLatentGrid,
    GridDims,
    MaskVolume,
    OccupancyField,
    SegmentMap,
    SparseLatent,
    WindowPlan,
    extrude_segment_map,
)


@dataclass
class SeamReport:
    planes: list
    boundary_mean: float
    interior_mean: float
    ratio: float
    n_boundary: int
    n_interior: int

    def lines(self) -> list[str]:
        return [
            f"boundary_pairs {self.n_boundary}",
            f"interior_pairs {self.n_interior}",
            f"boundary_mean {self.boundary_mean!r}",
            f"interior_mean {self.interior_mean!r}",
            f"ratio {self.ratio!r}",
        ]

    def csv_rows(self):
        return [("boundary_mean", self.boundary_mean), ("interior_mean", self.interior_mean),
                ("ratio", self.ratio), ("n_boundary", self.n_boundary), ("n_interior", self.n_interior)]


def _dense_with_mask(latent):
    if isinstance(latent, DenseLatentGrid):
        return latent.data, np.ones(latent.data.shape[:3], bool)
    if isinstance(latent, SparseLatent):
        return latent.to_dense()
    raise DataError(f"seam metric needs a dense or sparse latent, got {type(latent).__name__}")


def _face_diffs(x, active, axis):
    """Mean-over-channels |x[p] - x[p-1]| for all face pairs along ``axis`` with both ends active."""
    n = x.shape[axis]
    hi = [slice(None)] * 3
    lo = [slice(None)] * 3
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    d = np.abs(x[tuple(hi)] - x[tuple(lo)]).mean(-1)
    ok = active[tuple(hi)] & active[tuple(lo)]
    return d, ok


def seam_discontinuity(latent, plan: WindowPlan, seed: int = 0) -> SeamReport:
    """Mean cross-plane first difference on window-boundary planes vs a size-matched
    seeded sample of interior face pairs.

    A field with no boundary jump reports ratio 0 (this covers constant fields);
    a jump over a perfectly flat interior reports ``inf``.
    """
    x, active = _dense_with_mask(latent)
    if x.shape[:3] != plan.dims.spatial:
        raise DataError(f"plan dims {plan.dims.spatial} do not match latent {x.shape[:3]}")
    planes = plan.boundary_planes()
    bnd, inner = [], []
    for axis in range(3):
        d, ok = _face_diffs(x, active, axis)
        on = np.zeros(x.shape[axis] - 1, bool)
        # pair index p-1 holds the pair (p-1, p)
        on[[p - 1 for p in planes[axis]]] = True
        shape = [1, 1, 1]
        shape[axis] = -1
        on = np.broadcast_to(on.reshape(shape), d.shape)
        bnd.append(d[ok & on])
        inner.append(d[ok & ~on])
    bnd = np.concatenate(bnd)
    inner = np.concatenate(inner)
    if not len(inner):
        raise DataError("no interior face pairs to compare against")
    if not len(bnd):
        raise DataError("no face pairs on window-boundary planes")
    rng = np.random.default_rng(seed)
    sample = rng.choice(len(inner), size=len(bnd), replace=len(bnd) > len(inner))
    b = float(bnd.mean())
    i = float(inner[sample].mean())
    ratio = 0.0 if b == 0 else (b / i if i > 0 else float("inf"))
    return SeamReport(planes, b, i, ratio, len(bnd), len(sample))


# --- region statistics ----------------------------------------------------------


@dataclass
class RegionStatReport:
    statistic: str
    labels: list
    values: dict
    reference: dict
    deviation: dict = field(default_factory=dict)
    empty: list = field(default_factory=list)

    def csv_rows(self):
        rows = []
        for lab in self.labels:
            if lab in self.empty:
                rows.append((lab, "nan", self.reference.get(lab, "nan"), "nan", 1))
            else:
                rows.append((lab, self.values[lab], self.reference[lab], self.deviation[lab], 0))
        return rows


def region_statistic(occ: OccupancyField, latent: SparseLatent | None, region: np.ndarray,
                     statistic: str = "column_fill"):
    """``column_fill``: occupied fraction of the region's voxels (mean column height / depth);
    ``feature_norm``: mean latent feature norm at the region's active positions."""
    region = np.asarray(region, bool)
    if statistic == "column_fill":
        if not region.any():
            return None
        return float(occ.active[region].mean())
    if statistic == "feature_norm":
        if latent is None:
            raise DataError("feature_norm needs the appearance latent")
        sel = region[tuple(latent.positions.T)]
        if not sel.any():
            return None
        return float(np.linalg.norm(latent.features[sel], axis=1).mean())
    raise DataError(f"unknown region statistic {statistic!r}")


def region_fidelity(world, masks, reference, statistic: str = "column_fill", labels=None) -> RegionStatReport:
    """Per-label statistic over each mask's region and its deviation from ``reference``.

    ``world`` is ``(OccupancyField, SparseLatent or None)``; masks are hard
    (weights > 0.5 define the region) and must partition the grid.
    """
    occ, latent = world
    ms = [m.weights if isinstance(m, MaskVolume) else np.asarray(m, float) for m in masks]
    labels = list(range(len(ms))) if labels is None else list(labels)
    if len(labels) != len(ms):
        raise DataError("one label per mask required")
    regions = [m > 0.5 for m in ms]
    if ms and (np.sum(regions, axis=0) != 1).any():
        raise DataError("masks do not partition the grid")
    ref = reference if isinstance(reference, dict) else dict(zip(labels, reference))
    rep = RegionStatReport(statistic, labels, {}, ref)
    for lab, reg in zip(labels, regions):
        v = region_statistic(occ, latent, reg, statistic)
        if v is None or ref.get(lab) is None:
            rep.empty.append(lab)
            continue
        rep.values[lab] = v
        rep.deviation[lab] = v - float(ref[lab])
    return rep


def isolated_label_reference(model_s, decoders, seg: SegmentMap, dims: GridDims, cfg: SamplerConfig,
                             conditions=None, statistic: str = "column_fill") -> dict:
    """Per label: the statistic over that label's region of a world generated with
    that label alone everywhere (same seed, hence the same initial noise)."""
    dims = GridDims(*dims.spatial)
    conds = _resolve_conditions(seg, conditions)
    masks = extrude_segment_map(seg, dims)
    ref = {}
    for lab, cond, m in zip(seg.label_ids, conds, masks):
        occ = decode_occupancy(decoders, sample_latent_fusion(model_s, cond, dims, cfg))
        ref[lab] = region_statistic(occ, None, m.weights > 0.5, statistic)
    return ref


# --- normalization probes -------------------------------------------------------


def normalization_probe(plan: WindowPlan | None = None, masks=None, kernel_sigma: float | None = None) -> float:
    """Max ``|fused - 1|`` when every window (and every label) predicts a constant 1.

    With a plan only, this probes the window weights; with masks only, the
    segment weights; with both, the composition used by the samplers (each
    label fused over the windows its mask touches, then mixed by the masks).
    """
    if plan is None and masks is None:
        raise DataError("normalization probe needs a window plan, masks or both")
    ms = None if masks is None else [m.weights if isinstance(m, MaskVolume) else np.asarray(m, float)
                                      for m in masks]
    if plan is None:
        out = fuse_segment_velocities(ms, [np.ones(m.shape + (1,)) for m in ms])
        return float(np.abs(out - 1.0).max())
    sigma = kernel_sigma if kernel_sigma is not None else plan.window_size / 6.0
    n = plan.window_size
    ones = np.ones((n, n, n, 1))
    all_ks = list(range(len(plan.windows)))
    if ms is None:
        out = _window_blend(plan, all_ks, [ones] * len(all_ks), sigma, 1)
        return float(np.abs(out - 1.0).max())
    vs = []
    for m in ms:
        ks = [k for k in all_ks if m[plan.slices(k)].any()]
        vs.append(_window_blend(plan, ks, [ones] * len(ks), sigma, 1, require_full=False))
    out = fuse_segment_velocities(ms, vs)
    return float(np.abs(out - 1.0).max())
