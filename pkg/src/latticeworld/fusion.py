"""Overlapping-window latent fusion and segment-map-guided velocity fusion.

Both stages share one control flow: start from a single global noise field,
and at every step evaluate the model on each window view, blend the window
velocities with normalized Gaussian weights, mix per-label fields with the
(blurred) segment masks, and take one Euler step over the whole grid.

Stage S runs on a dense grid. Stage L runs on the sparse active set decoded
from stage S: each window evaluates the model on a dense block that holds only
the active positions inside it (with the occupancy mask as an input channel).

Window evaluations are batched in fixed-size chunks and may run on a thread
pool; results are always reduced in plan order, so outputs do not depend on
the thread count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DataError, EmptyStructureError
from .flowmodel import ToyDecoders, ToyFlowModel, decode_occupancy, euler_step
from .lattice import (
    DenseLatentGrid,
    GridDims,
    MaskVolume,
    OccupancyField,
    SegmentMap,
    SparseLatent,
    WindowPlan,
    build_window_plan,
    extrude_segment_map,
    gaussian_window_weights,
    smooth_mask,
)

log = logging.getLogger(__name__)

# window evaluations run in single precision; the latent itself is kept in float64
INFER_DTYPE = np.float32


@dataclass(frozen=True)
class SigmaSchedule:
    """Mask blur ``sigma_t = sigma_max * t``: wide early, a hard mask at ``t = 0``."""

    sigma_max: float = 8.0

    def __post_init__(self):
        if self.sigma_max < 0:
            raise DataError("sigma_max must be non-negative")

    def __call__(self, t: float) -> float:
        return self.sigma_max * float(t)


@dataclass
class SamplerConfig:
    steps: int = 10
    window_size: int = 16
    stride: int | None = None
    kernel_sigma: float | None = None
    seed: int = 0
    sigma_schedule: SigmaSchedule | None = None
    threads: int = 1
    chunk: int = 4

    def __post_init__(self):
        if self.steps < 1:
            raise DataError("steps must be >= 1")
        if self.window_size < 1 or self.chunk < 1 or self.threads < 1:
            raise DataError("window_size, chunk and threads must be positive")
        if self.kernel_sigma is not None and self.kernel_sigma <= 0:
            raise DataError("kernel_sigma must be positive")

    @property
    def sigma_w(self) -> float:
        return self.kernel_sigma if self.kernel_sigma is not None else self.window_size / 6.0

    @property
    def schedule(self) -> SigmaSchedule:
        """The mask-blur schedule; by default ``sigma_max`` is an eighth of the window size."""
        return self.sigma_schedule if self.sigma_schedule is not None else SigmaSchedule(self.window_size / 8.0)

    def times(self):
        """``(t_i, dt)`` pairs, uniform from 1 down to ``dt``."""
        dt = 1.0 / self.steps
        return [(1.0 - i / self.steps, dt) for i in range(self.steps)]

    def plan(self, dims: GridDims) -> WindowPlan:
        return build_window_plan(dims, self.window_size, self.stride)


def seed_streams(seed: int):
    """Independent generators for the structure and appearance stages."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]


class _Runner:
    def __init__(self, threads: int):
        self.pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def map(self, fn, tasks):
        if self.pool is None:
            return [fn(t) for t in tasks]
        return list(self.pool.map(fn, tasks))

    def __enter__(self):
        self._limits = threadpool_limits(limits=1, user_api="blas")
        return self

    def __exit__(self, *exc):
        self._limits.unregister()
        if self.pool is not None:
            self.pool.shutdown()


def _chunks(seq, n):
    return [seq[i:i + n] for i in range(0, len(seq), n)]


# --- Gaussian window fusion ---------------------------------------------------------


def _window_blend(plan: WindowPlan, ks, blocks, sigma, c, require_full=True):
    g = gaussian_window_weights(plan.window_size, sigma)
    den = np.zeros(plan.dims.spatial)
    for k in ks:
        den[plan.slices(k)] += g
    if require_full and (den == 0).any():
        raise DataError("voxel covered by zero windows")
    out = np.zeros(plan.dims.spatial + (c,))
    for k, v in zip(ks, blocks):
        sl = plan.slices(k)
        out[sl] += (g / den[sl])[..., None] * v
    return out


def fuse_window_velocities(plan: WindowPlan, per_window_v, kernel_sigma: float) -> DenseLatentGrid:
    """Per voxel, the Gaussian-weighted average of the velocities of all windows covering it."""
    blocks = [np.asarray(v, dtype=np.float64) for v in per_window_v]
    if len(blocks) != len(plan.windows):
        raise DataError(f"expected {len(plan.windows)} window blocks, got {len(blocks)}")
    n = plan.window_size
    for b in blocks:
        if b.shape[:3] != (n, n, n):
            raise DataError(f"window block shape {b.shape} does not match window size {n}")
    c = blocks[0].shape[3]
    return DenseLatentGrid(_window_blend(plan, range(len(blocks)), blocks, kernel_sigma, c))


def fuse_segment_velocities(masks, per_label_v):
    """``sum_k m_k v_k / sum_k m_k`` per voxel (or per active position)."""
    ms = [m.weights if isinstance(m, MaskVolume) else np.asarray(m, dtype=np.float64) for m in masks]
    vs = [v.data if isinstance(v, DenseLatentGrid) else np.asarray(v, dtype=np.float64) for v in per_label_v]
    if len(ms) != len(vs) or not ms:
        raise DataError("need one velocity field per mask")
    if len(ms) == 1:
        return vs[0]
    total = np.zeros_like(ms[0])
    for m in ms:
        total += m
    if (total <= 0).any():
        raise DataError("segment masks sum to zero at some voxel")
    out = np.zeros_like(vs[0])
    for m, v in zip(ms, vs):
        out += (m / total)[..., None] * v
    return out


# --- dense (stage S) sampling ---------------------------------------------------


def _resolve_conditions(seg: SegmentMap, conditions):
    if conditions is None:
        from .scenes import resolve_prompt

        return [resolve_prompt(seg.prompts[lab]) for lab in seg.label_ids]
    missing = [lab for lab in seg.label_ids if lab not in conditions]
    if missing:
        raise DataError(f"no condition for labels {missing}")
    return [conditions[lab] for lab in seg.label_ids]


def _dense_window_v(model, x, plan, ks, t, cond, cfg, runner):
    n = plan.window_size

    def task(ch):
        blocks = np.stack([x[plan.slices(k)] for k in ch])
        out, _ = model.forward(blocks, t, cond, extent=float(n), dtype=INFER_DTYPE)
        return out.reshape(blocks.shape)

    outs = runner.map(task, _chunks(list(ks), cfg.chunk))
    return [b for o in outs for b in o]


def _sample_dense(model: ToyFlowModel, conds, masks, dims: GridDims, cfg: SamplerConfig, noise):
    plan = cfg.plan(dims)
    x = np.array(noise, dtype=np.float64)
    if x.shape != dims.spatial + (model.channels,):
        raise DataError(f"noise shape {x.shape} does not match grid {dims.spatial} x {model.channels}")
    all_ks = list(range(len(plan.windows)))
    with _Runner(cfg.threads) as runner:
        for t, dt in cfg.times():
            if len(conds) == 1:
                blocks = _dense_window_v(model, x, plan, all_ks, t, conds[0], cfg, runner)
                v = _window_blend(plan, all_ks, blocks, cfg.sigma_w, model.channels)
            else:
                sig = cfg.schedule(t)
                ms = [smooth_mask(m, sig).weights for m in masks]
                vs = []
                for cond, m in zip(conds, ms):
                    ks = [k for k in all_ks if m[plan.slices(k)].any()]
                    blocks = _dense_window_v(model, x, plan, ks, t, cond, cfg, runner)
                    vs.append(_window_blend(plan, ks, blocks, cfg.sigma_w, model.channels, require_full=False))
                v = fuse_segment_velocities(ms, vs)
            x = euler_step(x, v, dt)
    return DenseLatentGrid(x)


def _noise_dense(rng, dims: GridDims, c: int):
    return rng.standard_normal(dims.spatial + (c,))


def sample_plain(model: ToyFlowModel, cond: int, dims: GridDims, cfg: SamplerConfig, noise=None) -> DenseLatentGrid:
    """Single-cube sampling without any windowing; the reference for the fused samplers."""
    if noise is None:
        noise = _noise_dense(seed_streams(cfg.seed)[0], dims, model.channels)
    x = np.array(noise, dtype=np.float64)
    extent = float(max(dims.spatial))
    with _Runner(1):
        for t, dt in cfg.times():
            out, _ = model.forward(x[None], t, cond, extent=extent, dtype=INFER_DTYPE)
            x = euler_step(x, out.reshape(x.shape), dt)
    return DenseLatentGrid(x)


def sample_latent_fusion(model: ToyFlowModel, cond: int, dims: GridDims, cfg: SamplerConfig,
                         noise=None) -> DenseLatentGrid:
    if noise is None:
        noise = _noise_dense(seed_streams(cfg.seed)[0], dims, model.channels)
    return _sample_dense(model, [cond], None, dims, cfg, noise)


def sample_segment_guided(model: ToyFlowModel, seg: SegmentMap, dims: GridDims, cfg: SamplerConfig,
                          noise=None, conditions=None) -> DenseLatentGrid:
    """Window-fused per-label velocities mixed by blurred segment masks at every step."""
    conds = _resolve_conditions(seg, conditions)
    masks = extrude_segment_map(seg, dims)
    if noise is None:
        noise = _noise_dense(seed_streams(cfg.seed)[0], dims, model.channels)
    return _sample_dense(model, conds, masks, dims, cfg, noise)


def sample_unfused_windows(model: ToyFlowModel, cond: int, dims: GridDims, cfg: SamplerConfig,
                           noise=None) -> DenseLatentGrid:
    """Baseline: every window denoised on its own from its view of the shared noise,
    then pasted in plan order (later windows overwrite earlier ones)."""
    plan = cfg.plan(dims)
    if noise is None:
        noise = _noise_dense(seed_streams(cfg.seed)[0], dims, model.channels)
    noise = np.asarray(noise, dtype=np.float64)
    out = np.zeros_like(noise)
    n = plan.window_size
    ks = list(range(len(plan.windows)))
    with _Runner(cfg.threads) as runner:
        def task(ch):
            x = np.stack([noise[plan.slices(k)] for k in ch])
            for t, dt in cfg.times():
                v, _ = model.forward(x, t, cond, extent=float(n), dtype=INFER_DTYPE)
                x = euler_step(x, v.reshape(x.shape), dt)
            return x

        res = runner.map(task, _chunks(ks, cfg.chunk))
    for k, block in zip(ks, (b for r in res for b in r)):
        out[plan.slices(k)] = block
    return DenseLatentGrid(out)


# --- sparse (stage L) sampling ------------------------------------------------------


@dataclass
class _SparseWindows:
    """For each window: member rows of the position list and their flat local index."""

    plan: WindowPlan
    members: list
    local_flat: list
    weights: list

    @classmethod
    def build(cls, plan: WindowPlan, positions: np.ndarray, sigma: float):
        n = plan.window_size
        g = gaussian_window_weights(n, sigma)
        members, flats, ws = [], [], []
        for win in plan.windows:
            o = np.array(win.origin)
            inside = np.all((positions >= o) & (positions < o + n), axis=1)
            rows = np.flatnonzero(inside)
            local = positions[rows] - o
            members.append(rows)
            flats.append(np.ravel_multi_index(tuple(local.T), (n, n, n)) if len(rows) else rows)
            ws.append(g[tuple(local.T)] if len(rows) else np.zeros(0))
        return cls(plan, members, flats, ws)


def _sparse_window_v(model, feats, sw: _SparseWindows, ks, t, cond, cfg, runner):
    n = sw.plan.window_size
    c = model.channels
    vox = n * n * n

    def task(ch):
        x = np.zeros((len(ch), vox, c))
        mask = np.zeros((len(ch), vox))
        rows = []
        for b, k in enumerate(ch):
            x[b, sw.local_flat[k]] = feats[sw.members[k]]
            mask[b, sw.local_flat[k]] = 1.0
            rows.append(b * vox + sw.local_flat[k])
        out, _ = model.forward(x.reshape(len(ch), n, n, n, c), t, cond,
                               mask=mask.reshape(len(ch), n, n, n), extent=float(n),
                               rows=np.concatenate(rows), dtype=INFER_DTYPE)
        splits = np.cumsum([len(sw.members[k]) for k in ch])[:-1]
        return np.split(out, splits)

    outs = runner.map(task, _chunks(list(ks), cfg.chunk))
    return [b for o in outs for b in o]


def _sparse_blend(sw: _SparseWindows, ks, blocks, n_pos, c):
    den = np.zeros(n_pos)
    for k in ks:
        den[sw.members[k]] += sw.weights[k]
    out = np.zeros((n_pos, c))
    for k, v in zip(ks, blocks):
        rows = sw.members[k]
        out[rows] += (sw.weights[k] / den[rows])[:, None] * v
    return out


def _sample_sparse(model, conds, masks, positions, dims: GridDims, cfg: SamplerConfig, noise):
    plan = cfg.plan(dims)
    sw = _SparseWindows.build(plan, positions, cfg.sigma_w)
    x = np.array(noise, dtype=np.float64)
    if x.shape != (len(positions), model.channels):
        raise DataError("sparse noise does not match the active set")
    all_ks = [k for k in range(len(plan.windows)) if len(sw.members[k])]
    idx = tuple(positions.T)
    with _Runner(cfg.threads) as runner:
        for t, dt in cfg.times():
            if len(conds) == 1:
                blocks = _sparse_window_v(model, x, sw, all_ks, t, conds[0], cfg, runner)
                v = _sparse_blend(sw, all_ks, blocks, len(x), model.channels)
            else:
                sig = cfg.schedule(t)
                ms = [smooth_mask(m, sig).weights[idx] for m in masks]
                vs = []
                for cond, m in zip(conds, ms):
                    ks = [k for k in all_ks if m[sw.members[k]].any()]
                    blocks = _sparse_window_v(model, x, sw, ks, t, cond, cfg, runner)
                    vs.append(_sparse_blend(sw, ks, blocks, len(x), model.channels))
                v = fuse_segment_velocities(ms, vs)
            x = euler_step(x, v, dt)
    return x


def sample_sparse_segment_guided(model, seg: SegmentMap, positions, dims: GridDims, cfg: SamplerConfig,
                                 noise, conditions=None) -> SparseLatent:
    positions = np.asarray(positions, np.int64).reshape(-1, 3)
    conds = _resolve_conditions(seg, conditions)
    masks = extrude_segment_map(seg, dims)
    feats = _sample_sparse(model, conds, masks, positions, dims, cfg, noise)
    return SparseLatent(dims.with_channels(model.channels), positions, feats)


def sample_sparse_plain(model, cond: int, positions, dims: GridDims, cfg: SamplerConfig, noise) -> SparseLatent:
    """Single-cube sparse sampling (the grid is one window)."""
    if max(dims.spatial) != min(dims.spatial):
        raise DataError("plain sparse sampling needs a cubic grid")
    positions = np.asarray(positions, np.int64).reshape(-1, 3)
    one = SamplerConfig(cfg.steps, dims.d, dims.d, cfg.kernel_sigma, cfg.seed, cfg.sigma_schedule, 1, 1)
    feats = _sample_sparse(model, [cond], None, positions, dims, one, noise)
    return SparseLatent(dims.with_channels(model.channels), positions, feats)


# --- two-stage world generation -------------------------------------------------


def _active_positions(occ: OccupancyField) -> np.ndarray:
    pos = occ.positions()
    if not len(pos):
        raise EmptyStructureError("stage-S produced no active voxels")
    return pos


def sample_world(models, decoders: ToyDecoders, seg: SegmentMap, dims: GridDims, cfg: SamplerConfig,
                 conditions=None):
    """Structure then appearance: returns ``(OccupancyField, SparseLatent)``.

    ``models`` is the pair ``(structure_model, appearance_model)``.
    """
    model_s, model_l = models
    dims = GridDims(*dims.spatial)
    rng_s, rng_l = seed_streams(cfg.seed)
    noise_s = _noise_dense(rng_s, dims, model_s.channels)
    struct = sample_segment_guided(model_s, seg, dims, cfg, noise_s, conditions)
    occ = decode_occupancy(decoders, struct)
    pos = _active_positions(occ)
    noise_l = rng_l.standard_normal((len(pos), model_l.channels))
    latent = sample_sparse_segment_guided(model_l, seg, pos, dims, cfg, noise_l, conditions)
    log.info("world sampled: %d active voxels", len(pos))
    return occ, latent


def sample_world_plain(models, decoders: ToyDecoders, cond: int, dims: GridDims, cfg: SamplerConfig):
    """Both stages with the plain single-cube sampler and one condition."""
    model_s, model_l = models
    dims = GridDims(*dims.spatial)
    rng_s, rng_l = seed_streams(cfg.seed)
    struct = sample_plain(model_s, cond, dims, cfg, _noise_dense(rng_s, dims, model_s.channels))
    occ = decode_occupancy(decoders, struct)
    pos = _active_positions(occ)
    noise_l = rng_l.standard_normal((len(pos), model_l.channels))
    return occ, sample_sparse_plain(model_l, cond, pos, dims, cfg, noise_l)
