"""Detail enhancer: regenerate each octant of a cube at the cube's own lattice resolution.

A child cube covers half the metric extent of its parent per axis but keeps
the same number of cells, so the 8 children together double the effective
resolution. Each child is sampled by the frozen base flow model through a
trainable per-voxel mixing layer F that sees

* the noisy child latent concatenated with the parent octant, trilinearly
  resampled at the child positions, and
* for already generated face-adjacent children: fresh noise at their positions
  concatenated with their latents, placed next to the target in an expanded
  frame.

The base model runs on the union and only the target positions are kept.
F starts as the identity on the noise channels, so an untrained enhancer
behaves exactly like the base model.

Child structure is not resampled: the child's positions are the 2x upsampling
of the parent octant's active set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError
from .flowmodel import FusionLayer, ToyFlowModel, apply_fusion, init_identity
from .lattice import (
    Direction,
    GridDims,
    OctantIndex,
    SparseLatent,
    adjacent_octants,
    gather_adjacent,
    merge_octants,
    trilinear_sample_many,
    truncate_latent,
)

log = logging.getLogger(__name__)


@dataclass
class EnhancerPair:
    parent: SparseLatent
    children: list
    label: int
    origin: tuple = (0, 0, 0)
    crop: int = 0
    scene: int = -1


@dataclass
class EnhancerCondition:
    parent_octant: SparseLatent
    adjacents: list = field(default_factory=list)
    j: int = 0

    def __post_init__(self):
        axes = [d.axis for d, _ in self.adjacents]
        if len(axes) > 3 or len(set(axes)) != len(axes):
            raise DataError("at most one adjacent cube per axis")


@dataclass
class EnhancerModel:
    base: ToyFlowModel
    fusion: FusionLayer

    @classmethod
    def create(cls, base: ToyFlowModel) -> "EnhancerModel":
        return cls(base, init_identity(FusionLayer.zeros(base.channels, base.channels)))

    @property
    def n_cond(self) -> int:
        return self.fusion.cond_channels


def upsample_positions(octant: SparseLatent) -> np.ndarray:
    """Child-frame positions: every parent-octant voxel ``q`` becomes ``2q + {0,1}^3``."""
    offs = np.array([(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    pos = (2 * octant.positions[:, None, :] + offs[None]).reshape(-1, 3)
    return pos[np.lexsort(pos.T[::-1])]


def child_to_parent_coords(positions: np.ndarray, half: GridDims) -> np.ndarray:
    """Continuous coordinate of a child voxel center inside the truncated parent octant."""
    q = positions.astype(np.float64) / 2.0 - 0.25
    return np.clip(q, 0.0, np.array(half.spatial, dtype=np.float64) - 1.0)


# --- pair construction -------------------------------------------------------------


def build_pairs(scenes, n: int, crop_sizes=(16, 32, 48, 64), per_scene: int = 4, min_content: int = 8,
                rng=0, max_retries: int = 20):
    """Parent crops and their 8 re-encoded metric octants.

    Returns ``(pairs, skipped)``, where ``skipped`` counts requested pairs that
    found no crop with at least ``min_content`` active voxels in all 9 cubes.
    """
    from .scenes import active_of, appearance_latent, crop_origin, encode_crop, family_label

    if not scenes:
        raise DataError("no scenes to build pairs from")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    sizes = [c for c in crop_sizes if c <= scenes[0].size]
    if not sizes:
        raise DataError("no crop size fits the scenes")
    pairs, skipped = [], 0
    for si, sc in enumerate(scenes):
        for _ in range(per_scene):
            for _attempt in range(max_retries):
                crop = int(sizes[rng.integers(len(sizes))])
                o = crop_origin(sc, crop, rng, anchor="surface")
                f, rgb = encode_crop(sc, o, crop, n)
                if active_of(f).sum() < min_content:
                    continue
                parent = appearance_latent(f, rgb)
                half = crop // 2
                children, ok = [], True
                for j in range(8):
                    oct_j = truncate_latent(parent, j)
                    co = o + np.array(OctantIndex(j).bits) * half
                    cf, crgb = encode_crop(sc, co, half, n)
                    if active_of(cf).sum() < min_content or len(oct_j) == 0:
                        ok = False
                        break
                    children.append(appearance_latent(cf, crgb, upsample_positions(oct_j)))
                if ok:
                    pairs.append(EnhancerPair(parent, children, family_label(sc.family),
                                              tuple(int(v) for v in o), crop, si))
                    break
            else:
                skipped += 1
    if skipped:
        log.warning("%d requested pairs had no valid crop", skipped)
    return pairs, skipped


# --- condition assembly and velocity ------------------------------------------------


@dataclass
class _Assembled:
    """Mixed features over the expanded frame, plus what backprop needs."""

    block_origin: np.ndarray
    block_shape: tuple
    flat: np.ndarray  # flat index of every mixed row in the block
    n_target: int
    raw: np.ndarray  # [noise | condition] rows fed to F
    mixed: np.ndarray


def parent_condition(cond: EnhancerCondition, target_positions: np.ndarray) -> np.ndarray:
    q = child_to_parent_coords(target_positions, cond.parent_octant.dims)
    return trilinear_sample_many(cond.parent_octant, q)


def _assemble(layer: FusionLayer, target_positions, noise, cond: EnhancerCondition, adj_noise, n: int):
    pos = [np.asarray(target_positions, np.int64)]
    raw = [np.concatenate([noise, parent_condition(cond, pos[0])], 1)]
    lo = np.zeros(3, np.int64)
    hi = np.full(3, n, np.int64)
    for (d, lat), eps in zip(cond.adjacents, adj_noise):
        shift = np.zeros(3, np.int64)
        shift[d.axis] = d.sign * n
        pos.append(lat.positions + shift)
        raw.append(np.concatenate([eps, lat.features], 1))
        if d.sign < 0:
            lo[d.axis] = -n
        else:
            hi[d.axis] = 2 * n
    allpos = np.concatenate(pos)
    shape = tuple(int(v) for v in hi - lo)
    flat = np.ravel_multi_index(tuple((allpos - lo).T), shape)
    if len(np.unique(flat)) != len(flat):
        raise DataError("target and adjacent positions collide in the expanded frame")
    rawm = np.concatenate(raw)
    mixed = apply_fusion(layer, rawm[:, : layer.c], rawm[:, layer.c:])
    return _Assembled(lo, shape, flat, len(pos[0]), rawm, mixed)


def assemble_condition(noise: SparseLatent, cond: EnhancerCondition, layer: FusionLayer, adj_noise=None):
    """Mixed features over the expanded position set as a SparseLatent in the expanded frame,
    together with the frame origin (relative to the target cube)."""
    n = noise.dims.d
    if adj_noise is None:
        adj_noise = [np.zeros((len(lat), layer.c)) for _, lat in cond.adjacents]
    a = _assemble(layer, noise.positions, noise.features, cond, adj_noise, n)
    pos = np.stack(np.unravel_index(a.flat, a.block_shape), 1)
    return SparseLatent(GridDims(*a.block_shape, layer.c), pos, a.mixed), a.block_origin


def _run_base(base: ToyFlowModel, a: _Assembled, t, label, n, dtype=np.float64):
    c = base.channels
    vox = int(np.prod(a.block_shape))
    x = np.zeros((vox, c))
    m = np.zeros(vox)
    x[a.flat] = a.mixed
    m[a.flat] = 1.0
    rows = a.flat[: a.n_target]
    out, cache = base.forward(x.reshape((1,) + a.block_shape + (c,)), t, label,
                              mask=m.reshape((1,) + a.block_shape), origin=a.block_origin,
                              extent=float(n), rows=rows, dtype=dtype)
    return out, cache


def enhancer_velocity(model: EnhancerModel, s_t: SparseLatent, t: float, cond: EnhancerCondition, label: int,
                      adj_noise=None, dtype=np.float64) -> SparseLatent:
    """Base velocity on the expanded, mixed position set, cropped to the target positions."""
    n = s_t.dims.d
    if adj_noise is None:
        adj_noise = [np.zeros((len(lat), model.base.channels)) for _, lat in cond.adjacents]
    a = _assemble(model.fusion, s_t.positions, s_t.features, cond, adj_noise, n)
    out, _ = _run_base(model.base, a, t, label, n, dtype)
    return SparseLatent(s_t.dims, s_t.positions, out.astype(np.float64))


# --- fine-tuning -------------------------------------------------------------------


def _masked_loss(model: EnhancerModel, target, noise, t, cond, label, adj_noise, grad=True):
    """Flow-matching loss on the target positions and its gradient w.r.t. F."""
    n = target.dims.d
    x_t = (1.0 - t) * target.features + t * noise
    a = _assemble(model.fusion, target.positions, x_t, cond, adj_noise, n)
    out, cache = _run_base(model.base, a, t, label, n)
    diff = out - (noise - target.features)
    loss = float(np.mean(diff * diff))
    if not grad:
        return loss, None
    gout = 2.0 * diff / diff.size
    _, gx = model.base.backward(cache, gout, input_grad=True)
    gmixed = gx.reshape(-1, model.base.channels)[a.flat]
    return loss, (gmixed.T @ a.raw, gmixed.sum(0))


def _training_item(pair: EnhancerPair, rng, count=None):
    j = int(rng.integers(8))
    k = int(rng.integers(0, 4)) if count is None else count
    nbrs = adjacent_octants(j)
    pick = sorted(rng.choice(3, size=k, replace=False).tolist()) if k else []
    adj = [(nbrs[i][0], pair.children[nbrs[i][1]]) for i in pick]
    cond = EnhancerCondition(truncate_latent(pair.parent, j), adj, j)
    target = pair.children[j]
    t = float(rng.random())
    noise = rng.standard_normal(target.features.shape)
    adj_noise = [rng.standard_normal(lat.features.shape) for _, lat in adj]
    return target, noise, t, cond, adj_noise


def finetune_enhancer(model: EnhancerModel, pairs, steps: int, lr: float, rng=0, batch: int = 2,
                      clip: float = 1.0):
    """SGD on F only; the base model is never written. Returns ``(EnhancerModel, losses)``.

    Gradients are clipped to global norm ``clip`` (``0`` disables clipping).
    """
    if not pairs:
        raise DataError("enhancer fine-tuning needs at least one pair")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    layer = model.fusion.copy()
    out_model = EnhancerModel(model.base, layer)
    losses = []
    for _ in range(steps):
        gw = np.zeros_like(layer.weight)
        gb = np.zeros_like(layer.bias)
        total = 0.0
        for _ in range(batch):
            pair = pairs[int(rng.integers(len(pairs)))]
            target, noise, t, cond, adj_noise = _training_item(pair, rng)
            loss, (w, b) = _masked_loss(out_model, target, noise, t, cond, pair.label, adj_noise)
            total += loss
            gw += w
            gb += b
        gw /= batch
        gb /= batch
        norm = float(np.sqrt(np.sum(gw * gw) + np.sum(gb * gb)))
        if clip and norm > clip:
            gw *= clip / norm
            gb *= clip / norm
        if lr != 0.0:
            layer.weight -= lr * gw
            layer.bias -= lr * gb
        losses.append(total / batch)
    return out_model, np.array(losses)


def validation_loss(model: EnhancerModel, pairs, seed: int = 0, items: int = 64) -> float:
    """Masked flow-matching loss on a fixed, seeded draw of (pair, octant, t, noise, adjacents)."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(items):
        pair = pairs[int(rng.integers(len(pairs)))]
        target, noise, t, cond, adj_noise = _training_item(pair, rng)
        total += _masked_loss(model, target, noise, t, cond, pair.label, adj_noise, grad=False)[0]
    return total / items


def without_condition(model: EnhancerModel) -> EnhancerModel:
    """The same F with its condition columns zeroed."""
    layer = model.fusion.copy()
    layer.weight[:, layer.c:] = 0.0
    return EnhancerModel(model.base, layer)


# --- autoregressive sampling ----------------------------------------------------------


@dataclass
class EnhanceConfig:
    steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise DataError("steps must be >= 1")


def _sample_child(model: EnhancerModel, cond: EnhancerCondition, label: int, n: int, steps: int, rng):
    half = cond.parent_octant.dims
    pos = upsample_positions(cond.parent_octant)
    dims = GridDims(half.d * 2, half.h * 2, half.w * 2, model.base.channels)
    x = rng.standard_normal((len(pos), model.base.channels))
    if not len(pos):
        return SparseLatent(dims, pos, x)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i / steps
        adj_noise = [rng.standard_normal(lat.features.shape) for _, lat in cond.adjacents]
        v = enhancer_velocity(model, SparseLatent(dims, pos, x), t, cond, label, adj_noise)
        x = x - dt * v.features
    return SparseLatent(dims, pos, x)


def sample_octants(model: EnhancerModel, parent: SparseLatent, label: int, cfg: EnhanceConfig,
                   rng=None, outside: Callable | None = None) -> SparseLatent:
    """Generate octants 0..7 in order and merge them into a grid of twice the parent's size.

    Octant ``j`` sees the parent octant and every already generated face
    neighbour. ``outside(j)`` may add neighbours from other cubes as a list of
    ``(Direction, SparseLatent)`` on axes without an in-cube neighbour.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = parent.dims.d
    if not (parent.dims.d == parent.dims.h == parent.dims.w) or n % 2:
        raise DataError("enhancer parents must be cubes with even size")
    done: dict = {}
    for j in range(8):
        adj = gather_adjacent(done, j, 3)
        if outside is not None:
            have = {d.axis for d, _ in adj}
            adj += [(d, lat) for d, lat in outside(j) if d.axis not in have]
            adj.sort(key=lambda a: (-a[0].axis))
        cond = EnhancerCondition(truncate_latent(parent, j), adj, j)
        done[j] = _sample_child(model, cond, label, n, cfg.steps, rng)
    return merge_octants([done[j] for j in range(8)])


def _tile_children(merged: SparseLatent) -> list:
    """Split a merged ``2n`` cube back into its 8 ``n``-cubes."""
    from .lattice import split_octants

    return split_octants(merged)


def enhance_world(model: EnhancerModel, world: SparseLatent, levels: int, cfg: EnhanceConfig,
                  cond=0, tile: int = 16) -> SparseLatent:
    """Apply the enhancer ``levels`` times over ``tile``-cubes in lexicographic order.

    ``cond`` is a label or a callable mapping the tile center, as a fraction of
    the world extent per axis, to a label.
    Cross-tile neighbours come from tiles already processed in the same pass
    (always on the lower side of the target).
    """
    if levels < 1:
        raise DataError("levels must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    cur = world
    for level in range(levels):
        n = tile
        dims = cur.dims
        bad = [f"{name}={s} (pad to {-(-s // n) * n})" for name, s in zip("dhw", dims.spatial) if s % n]
        if bad or n % 2:
            raise DataError(f"world is not tileable by cubes of {n}: " + ", ".join(bad or [f"odd tile {n}"]))
        grid = [s // n for s in dims.spatial]
        keys = cur.positions // n
        results: dict = {}
        for tz in range(grid[0]):
            for ty in range(grid[1]):
                for tx in range(grid[2]):
                    tix = (tz, ty, tx)
                    o = np.array(tix) * n
                    sel = np.all(keys == tix, axis=1)
                    parent = SparseLatent(GridDims(n, n, n, dims.c), cur.positions[sel] - o, cur.features[sel])
                    frac = tuple((o + n / 2) / np.array(dims.spatial))
                    label = cond(frac) if callable(cond) else int(cond)

                    def outside(j, tix=tix):
                        extra = []
                        bits = OctantIndex(j).bits
                        for axis in (2, 1, 0):
                            if bits[axis]:
                                continue
                            nb = list(tix)
                            nb[axis] -= 1
                            if nb[axis] < 0:
                                continue
                            nb_bits = list(bits)
                            nb_bits[axis] = 1
                            part = results[tuple(nb)][OctantIndex.from_bits(*nb_bits)]
                            extra.append((Direction(axis, -1), part))
                        return extra

                    merged = sample_octants(model, parent, label, cfg, rng, outside)
                    results[tix] = _tile_children(merged)
        pos, feats = [], []
        for tix, parts in results.items():
            for j, p in enumerate(parts):
                off = (np.array(tix) * 2 * n) + np.array(OctantIndex(j).bits) * n
                pos.append(p.positions + off)
                feats.append(p.features)
        out_dims = GridDims(dims.d * 2, dims.h * 2, dims.w * 2, dims.c)
        cur = SparseLatent(out_dims, np.concatenate(pos), np.concatenate(feats)).canonical()
        log.info("enhance level %d: %d active positions", level + 1, len(cur))
    return cur
