"""Velocity fields, the toy flow model, the condition-mixing layer, and decoders.

Time convention: ``t = 1`` is pure noise and ``t = 0`` is data, so the noisy
interpolant is ``(1 - t) * s + t * eps`` and the regression target is
``eps - s``. Sampling integrates ``t: 1 -> 0`` with ``s <- s - dt * v``.

All arrays are float64; gradients are written out by hand so that training is
bit-reproducible for a given seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError
from .lattice import DenseLatentGrid, OccupancyField, SparseLatent

log = logging.getLogger(__name__)

N_TIME_FEATURES = 3


def check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DataError(f"flow time {t} outside [0, 1]")
    return t


def _unwrap(a):
    if isinstance(a, DenseLatentGrid):
        return a.data, lambda x: DenseLatentGrid(x)
    if isinstance(a, SparseLatent):
        return a.features, lambda x: SparseLatent(a.dims, a.positions, x)
    arr = np.asarray(a, dtype=np.float64)
    return arr, lambda x: x


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DataError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def interpolate_noisy(s, eps, t: float):
    """``(1 - t) * s + t * eps``; exact at both endpoints."""
    t = check_time(t)
    sa, wrap = _unwrap(s)
    ea, _ = _unwrap(eps)
    _same_shape(sa, ea, "interpolate_noisy")
    if t == 0.0:
        return wrap(sa.copy())
    if t == 1.0:
        return wrap(ea.copy())
    return wrap((1.0 - t) * sa + t * ea)


def flow_matching_target(s, eps):
    sa, wrap = _unwrap(s)
    ea, _ = _unwrap(eps)
    _same_shape(sa, ea, "flow_matching_target")
    return wrap(ea - sa)


def euler_step(s_t, v, dt: float):
    """One rectified-flow step toward data: ``s_t - dt * v``."""
    if dt <= 0:
        raise DataError(f"dt must be positive, got {dt}")
    sa, wrap = _unwrap(s_t)
    va, _ = _unwrap(v)
    _same_shape(sa, va, "euler_step")
    return wrap(sa - dt * va)


# --- condition-mixing layer ---------------------------------------------------


@dataclass
class FusionLayer:
    """Per-voxel affine map of ``[noise (c), condition (C)] -> c``."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def c(self) -> int:
        return self.weight.shape[0]

    @property
    def cond_channels(self) -> int:
        return self.weight.shape[1] - self.weight.shape[0]

    @classmethod
    def zeros(cls, c: int, cond_channels: int) -> "FusionLayer":
        return cls(np.zeros((c, c + cond_channels)), np.zeros(c))

    def copy(self) -> "FusionLayer":
        return FusionLayer(self.weight.copy(), self.bias.copy())


def init_identity(layer: FusionLayer) -> FusionLayer:
    """Ones on the noise diagonal, zeros elsewhere: output equals the noise for any condition."""
    w = np.zeros_like(layer.weight, dtype=np.float64)
    w[np.arange(layer.c), np.arange(layer.c)] = 1.0
    return FusionLayer(w, np.zeros(layer.c))


def apply_fusion(layer: FusionLayer, noise_feat, cond_feat) -> np.ndarray:
    n = np.asarray(noise_feat, dtype=np.float64)
    cnd = np.asarray(cond_feat, dtype=np.float64)
    if n.shape[-1] != layer.c or cnd.shape[-1] != layer.cond_channels:
        raise DataError(
            f"fusion layer expects {layer.c}+{layer.cond_channels} channels, "
            f"got {n.shape[-1]}+{cnd.shape[-1]}"
        )
    x = np.concatenate([n, cnd], axis=-1)
    return x @ layer.weight.T + layer.bias


# --- toy flow model -------------------------------------------------------------


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _silu(x):
    # x / (1 + exp(-x)), evaluated in one buffer
    out = np.negative(x)
    with np.errstate(over="ignore"):
        np.exp(out, out=out)
    out += 1.0
    np.divide(x, out, out=out)
    return out


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _time_features(t: float) -> np.ndarray:
    return np.array([t, t * t, t * t * t])


def _box(a: np.ndarray, r: int) -> np.ndarray:
    """Zero-padded cube mean over axes 1..3, summed slice by slice so it is exactly local.

    (A running-sum filter leaks rounding noise past the window.) Self-adjoint.
    """
    out = a
    for axis in (1, 2, 3):
        n = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad)
        acc = np.zeros_like(out)
        for k in range(2 * r + 1):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(k, k + n)
            acc += padded[tuple(sl)]
        out = acc
    return out / float((2 * r + 1) ** 3)


def _shift_z(a: np.ndarray, r: int) -> np.ndarray:
    """``out[:, z] = a[:, z + r]`` with zero fill (r may be negative)."""
    out = np.zeros_like(a)
    if r > 0:
        out[:, :-r] = a[:, r:]
    elif r < 0:
        out[:, -r:] = a[:, :r]
    else:
        out[:] = a
    return out


PARAM_ORDER = ("embed", "w_feat", "w_cond", "b1", "w2", "b2", "w_out", "b_out")


@dataclass
class ToyFlowModel:
    """Per-voxel MLP over multi-scale patch statistics, position, time and label.

    Features of the input plus an occupancy-mask channel: the raw value, and for
    each box radius ``r`` the box mean centred, shifted up by ``r`` and shifted
    down by ``r`` along z. Nothing farther than ``patch_radius`` voxels away can
    influence a voxel's output.
    """

    channels: int
    n_labels: int
    hidden: int = 32
    patch_radius: int = 4
    embed_dim: int = 8
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patch_radius < 2:
            raise DataError("patch_radius must be >= 2")

    @property
    def radii(self) -> tuple[int, ...]:
        return (1,) if self.patch_radius < 4 else (1, self.patch_radius // 2)

    @property
    def n_features(self) -> int:
        return (self.channels + 1) * (1 + 3 * len(self.radii)) + 3

    @classmethod
    def create(cls, channels, n_labels, hidden=32, patch_radius=4, embed_dim=8, seed=0) -> "ToyFlowModel":
        m = cls(channels, n_labels, hidden, patch_radius, embed_dim)
        rng = np.random.default_rng(seed)
        f, h = m.n_features, hidden
        m.params = {
            "embed": rng.standard_normal((n_labels, embed_dim)) * 0.5,
            "w_feat": rng.standard_normal((f, h)) / np.sqrt(f),
            "w_cond": rng.standard_normal((embed_dim + N_TIME_FEATURES, h)) / np.sqrt(embed_dim + 3),
            "b1": np.zeros(h),
            "w2": rng.standard_normal((h, h)) / np.sqrt(h),
            "b2": np.zeros(h),
            "w_out": rng.standard_normal((h, channels)) * 0.01,
            "b_out": np.zeros(channels),
        }
        return m

    def copy(self) -> "ToyFlowModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def zeros_like(self) -> "ToyFlowModel":
        return replace(self, params={k: np.zeros_like(v) for k, v in self.params.items()})

    # forward / backward -------------------------------------------------------

    def _features(self, x, mask, origin, extent):
        b, d, h, w, _ = x.shape
        dtype = x.dtype
        xm = np.concatenate([x, mask[..., None]], axis=-1)
        feats = [xm]
        for r in self.radii:
            bx = _box(xm, r)
            feats += [bx, _shift_z(bx, r), _shift_z(bx, -r)]
        origin = np.broadcast_to(np.asarray(origin, dtype=np.float64), (b, 3))
        grids = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
        pos = np.empty((b, d, h, w, 3), dtype)
        for a in range(3):
            pos[..., a] = (grids[a][None] + origin[:, a, None, None, None]) / extent - 0.5
        feats.append(pos)
        return np.concatenate(feats, axis=-1)

    def forward(self, x, t, label, mask=None, origin=(0, 0, 0), extent=None, rows=None, dtype=np.float64):
        """Velocity at the selected rows of a batch of grids.

        ``x``: ``(B, D, H, W, c)``; ``mask``: ``(B, D, H, W)`` (defaults to all
        ones); positions are ``(index + origin) / extent - 0.5`` per axis;
        ``rows`` indexes the flattened ``B*D*H*W`` voxels (default: all).
        Returns ``(out, cache)`` with ``out`` of shape ``(len(rows), c)``.
        ``dtype=float32`` is the fast inference path; gradients need float64.
        """
        x = np.asarray(x, dtype=dtype)
        if x.ndim != 5 or x.shape[-1] != self.channels:
            raise DataError(f"model expects (B,D,H,W,{self.channels}) input, got {x.shape}")
        if not 0 <= label < self.n_labels:
            raise DataError(f"label {label} outside model vocabulary of {self.n_labels}")
        mask = np.ones(x.shape[:-1], dtype) if mask is None else np.asarray(mask, dtype=dtype)
        if extent is None:
            extent = float(max(x.shape[1:4]))
        p = self.params if dtype == np.float64 else {k: v.astype(dtype) for k, v in self.params.items()}
        feat = self._features(x, mask, origin, extent).reshape(-1, self.n_features)
        if rows is not None:
            feat = feat[rows]
        cvec = np.concatenate([p["embed"][label], _time_features(t).astype(dtype)])
        pre1 = feat @ p["w_feat"] + (cvec @ p["w_cond"] + p["b1"])
        h1 = _silu(pre1)
        pre2 = h1 @ p["w2"] + p["b2"]
        h2 = _silu(pre2)
        out = h2 @ p["w_out"] + p["b_out"]
        cache = dict(feat=feat, cvec=cvec, pre1=pre1, h1=h1, pre2=pre2, h2=h2,
                     label=label, rows=rows, shape=x.shape)
        return out, cache

    def backward(self, cache, gout, input_grad=False):
        """Parameter gradients (and optionally d/dx) for upstream gradient ``gout``."""
        p = self.params
        g = {}
        g["w_out"] = cache["h2"].T @ gout
        g["b_out"] = gout.sum(0)
        gpre2 = (gout @ p["w_out"].T) * _silu_grad(cache["pre2"])
        g["w2"] = cache["h1"].T @ gpre2
        g["b2"] = gpre2.sum(0)
        gpre1 = (gpre2 @ p["w2"].T) * _silu_grad(cache["pre1"])
        g["w_feat"] = cache["feat"].T @ gpre1
        gsum = gpre1.sum(0)
        g["b1"] = gsum
        g["w_cond"] = np.outer(cache["cvec"], gsum)
        gvec = p["w_cond"] @ gsum
        g["embed"] = np.zeros_like(p["embed"])
        g["embed"][cache["label"]] = gvec[: self.embed_dim]
        if not input_grad:
            return g, None
        shape = cache["shape"]
        gfeat_rows = gpre1 @ p["w_feat"].T
        nvox = int(np.prod(shape[:-1]))
        if cache["rows"] is None:
            gfeat = gfeat_rows
        else:
            gfeat = np.zeros((nvox, self.n_features))
            np.add.at(gfeat, cache["rows"], gfeat_rows)
        gfeat = gfeat.reshape(shape[:-1] + (self.n_features,))
        cm = self.channels + 1
        gxm = gfeat[..., :cm].copy()
        k = cm
        for r in self.radii:
            gb = gfeat[..., k:k + cm] + _shift_z(gfeat[..., k + cm:k + 2 * cm], -r) \
                + _shift_z(gfeat[..., k + 2 * cm:k + 3 * cm], r)
            gxm += _box(gb, r)
            k += 3 * cm
        return g, gxm[..., : self.channels]

    def velocity(self, s_t, t, label, mask=None, origin=(0, 0, 0), extent=None) -> np.ndarray:
        """Velocity over a single ``(D, H, W, c)`` grid."""
        t = check_time(t)
        x = np.asarray(s_t, dtype=np.float64)
        m = None if mask is None else np.asarray(mask)[None]
        out, _ = self.forward(x[None], t, label, m, origin, extent)
        return out.reshape(x.shape)


def velocity(model: ToyFlowModel, s_t, t: float, cond: int, **kw):
    sa, wrap = _unwrap(s_t)
    if isinstance(s_t, SparseLatent):
        dense, mask = s_t.to_dense()
        v = model.velocity(dense, t, cond, mask=mask, **kw)
        z, y, x = s_t.positions.T
        return wrap(v[z, y, x])
    return wrap(model.velocity(sa, t, cond, **kw))


# --- flow-matching training -----------------------------------------------------


@dataclass
class FlowSample:
    """A clean training latent on a cube: dense data, occupancy mask and label."""

    data: np.ndarray
    mask: np.ndarray
    label: int

    @classmethod
    def from_dense(cls, grid: DenseLatentGrid, label: int) -> "FlowSample":
        return cls(grid.data, np.ones(grid.data.shape[:3], bool), label)

    @classmethod
    def from_sparse(cls, s: SparseLatent, label: int) -> "FlowSample":
        dense, mask = s.to_dense()
        return cls(dense.astype(np.float64), mask, label)


def flow_matching_loss(model, x_t, mask, t, label, target, rows, origin=(0, 0, 0), extent=None, grad=True):
    """Mean squared error of the model velocity against ``target`` on ``rows``."""
    out, cache = model.forward(x_t[None], t, label, None if mask is None else mask[None],
                               origin, extent, rows)
    diff = out - target
    loss = float(np.mean(diff * diff))
    if not grad:
        return loss, None
    gout = 2.0 * diff / diff.size
    g, _ = model.backward(cache, gout)
    return loss, g


def _crop_item(sample: FlowSample, crop: int | None, margin: int, rng):
    shape = sample.data.shape[:3]
    extent = float(max(shape))
    if crop is None or crop >= min(shape):
        sl = tuple(slice(0, n) for n in shape)
        inner = np.ones(shape, bool)
        return sl, inner, (0, 0, 0), extent
    o = [int(rng.integers(0, n - crop + 1)) for n in shape]
    lo = [max(a - margin, 0) for a in o]
    hi = [min(a + crop + margin, n) for a, n in zip(o, shape)]
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    inner = np.zeros([b - a for a, b in zip(lo, hi)], bool)
    inner[tuple(slice(a - l, a - l + crop) for a, l in zip(o, lo))] = True
    return sl, inner, tuple(lo), extent


def train_flow_matching(model: ToyFlowModel, dataset, steps: int, lr: float, rng,
                        crop: int | None = 8, batch: int = 4, clip: float | None = 1.0):
    """Plain SGD on the flow-matching loss with ``t ~ U(0, 1)``.

    Each step draws ``batch`` random sub-cubes (plus a ``patch_radius`` margin so
    interior features match full-cube evaluation). Returns ``(model, losses)``.
    ``clip`` bounds the global gradient norm per step.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    model = model.copy()
    losses = []
    for step in range(steps):
        acc = {k: np.zeros_like(v) for k, v in model.params.items()}
        total, used, draws = 0.0, 0, 0
        # crops without supervised voxels are redrawn, so every step sees a full batch
        while used < batch and draws < 20 * batch:
            draws += 1
            sample = dataset[int(rng.integers(len(dataset)))]
            sl, inner, origin, extent = _crop_item(sample, crop, model.patch_radius, rng)
            t = float(rng.random())
            s = sample.data[sl]
            m = sample.mask[sl]
            eps = rng.standard_normal(s.shape) * m[..., None]
            x_t = (1.0 - t) * s + t * eps
            sel = inner & m
            if not sel.any():
                continue
            rows = np.flatnonzero(sel.ravel())
            target = (eps - s)[sel]
            loss, g = flow_matching_loss(model, x_t, m.astype(np.float64), t, sample.label,
                                         target, rows, origin, extent)
            total += loss
            used += 1
            for k in acc:
                acc[k] += g[k]
        if used == 0:
            raise DataError("training crops contain no supervised voxels")
        scale = 1.0 / used
        if clip is not None:
            norm = np.sqrt(sum(float(np.sum(v * v)) for v in acc.values())) * scale
            if norm > clip:
                scale *= clip / norm
        if lr != 0.0:
            for k, v in acc.items():
                model.params[k] -= lr * scale * v
        losses.append(total / used)
        if step % 200 == 0:
            log.debug("flow step %d loss %.5f", step, losses[-1])
    return model, np.array(losses)


def evaluate_flow_loss(model: ToyFlowModel, samples, seed: int = 1234,
                       times=(0.1, 0.3, 0.5, 0.7, 0.9)) -> float:
    """Deterministic full-cube validation loss averaged over fixed times."""
    rng = np.random.default_rng(seed)
    total, n = 0.0, 0
    for sample in samples:
        m = sample.mask
        rows = np.flatnonzero(m.ravel())
        if not len(rows):
            continue
        extent = float(max(m.shape))
        for t in times:
            eps = rng.standard_normal(sample.data.shape) * m[..., None]
            x_t = (1.0 - t) * sample.data + t * eps
            loss, _ = flow_matching_loss(model, x_t, m.astype(np.float64), t, sample.label,
                                         (eps - sample.data)[m], rows, extent=extent, grad=False)
            total += loss
            n += 1
    return total / max(n, 1)


# --- decoders -------------------------------------------------------------------


@dataclass
class ToyDecoders:
    """Occupancy decoder (latent -> signed scalar) and appearance decoder (latent -> density, RGB)."""

    occ_weight: np.ndarray
    occ_bias: float
    app_weight: np.ndarray
    app_bias: np.ndarray

    @classmethod
    def identity(cls, c_struct: int, c_app: int) -> "ToyDecoders":
        ow = np.zeros(c_struct)
        ow[0] = 1.0
        return cls(ow, 0.0, np.zeros((c_app, 4)), np.full(4, 0.5))

    def copy(self) -> "ToyDecoders":
        return ToyDecoders(self.occ_weight.copy(), float(self.occ_bias),
                           self.app_weight.copy(), self.app_bias.copy())

    def occupancy_values(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent, dtype=np.float64) @ self.occ_weight + self.occ_bias

    def appearance_raw(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.app_weight + self.app_bias

    def appearance(self, features: np.ndarray) -> np.ndarray:
        """``(density, r, g, b)`` per feature row, clamped to [0, 1]."""
        return np.clip(self.appearance_raw(features), 0.0, 1.0)


def decode_occupancy(dec: ToyDecoders, dense: DenseLatentGrid) -> OccupancyField:
    data = dense.data if isinstance(dense, DenseLatentGrid) else np.asarray(dense)
    return OccupancyField(dec.occupancy_values(data), 0.0)


def reconstruction_loss(dec: ToyDecoders, crops) -> float:
    """Mean squared (density + RGB) error of the clamped decoder over ``(features, targets)`` crops."""
    err = [np.mean((dec.appearance(f) - y) ** 2) for f, y in crops if len(f)]
    return float(np.mean(err)) if err else 0.0


def finetune_decoder(dec: ToyDecoders, crops, steps: int, lr: float, rng=0):
    """SGD on the appearance decoder over ``(features (L, c), targets (L, 4))`` crops."""
    crops = [(np.asarray(f, np.float64), np.asarray(y, np.float64)) for f, y in crops if len(f)]
    if not crops:
        raise DataError("decoder fine-tuning dataset is empty")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    dec = dec.copy()
    losses = []
    for _ in range(steps):
        f, y = crops[int(rng.integers(len(crops)))]
        raw = dec.appearance_raw(f)
        out = np.clip(raw, 0.0, 1.0)
        diff = out - y
        losses.append(float(np.mean(diff * diff)))
        gout = 2.0 * diff / diff.size * ((raw > 0.0) & (raw < 1.0))
        if lr != 0.0:
            dec.app_weight -= lr * (f.T @ gout)
            dec.app_bias -= lr * gout.sum(0)
    return dec, np.array(losses)
