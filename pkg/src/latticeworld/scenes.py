"""Procedural voxel scenes and the fixed toy encoders that turn crops into latents.

A scene is a dense voxel volume ``(S, S, S)`` indexed ``[z, y, x]`` (z up) with
a binary density and an RGB color per voxel. Three families with distinct
statistics stand in for text-described terrain:

* ``hills``  - smooth rolling heightfield, green, tall on average
* ``towers`` - thin flat ground plus scattered tall square columns, grey/red
* ``plains`` - low nearly-flat ground, yellow

Crops of any size are encoded on a fixed lattice of ``n`` cells per axis with
2x2x2 point supersampling per cell, so a larger crop yields a coarser view of
the same world. Structure latents are the signed occupancy ``2 f - 1``;
appearance latents mix ``(tanh(3 (f - 1/2)), r - 1/2, g - 1/2, b - 1/2)``
through a fixed orthonormal matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .flowmodel import FlowSample, ToyDecoders
from .lattice import DenseLatentGrid, GridDims, SparseLatent

FAMILIES = ("hills", "towers", "plains")
SCENE_SIZE = 64
STRUCT_CHANNELS = 1
APP_CHANNELS = 4

_Q = np.linalg.qr(np.random.default_rng(20240611).standard_normal((4, 4)))[0]


@dataclass
class VoxelScene:
    density: np.ndarray  # (S, S, S) in {0, 1}
    rgb: np.ndarray  # (S, S, S, 3)
    family: str

    @property
    def size(self) -> int:
        return self.density.shape[0]

    def heights(self) -> np.ndarray:
        return self.density.sum(0)

    def to_sparse(self) -> SparseLatent:
        active = self.density > 0
        feats = np.concatenate([self.density[..., None], self.rgb], -1)
        return SparseLatent.from_dense(feats.astype(np.float32).astype(np.float64), active)

    @classmethod
    def from_sparse(cls, s: SparseLatent, family: str) -> "VoxelScene":
        if s.dims.c != 4 or not (s.dims.d == s.dims.h == s.dims.w):
            raise DataError("scene archives must be cubic with 4 channels (density, r, g, b)")
        dense, _ = s.to_dense()
        return cls(dense[..., 0], dense[..., 1:], family)


def family_label(family: str) -> int:
    try:
        return FAMILIES.index(family)
    except ValueError:
        raise DataError(f"unknown scene family {family!r}; known: {', '.join(FAMILIES)}") from None


def resolve_prompt(prompt: str) -> int:
    """Map a free-text prompt to the toy label vocabulary (earliest family word wins)."""
    text = prompt.lower()
    hits = []
    for i, fam in enumerate(FAMILIES):
        for word in (fam, fam.rstrip("s")):
            k = text.find(word)
            if k >= 0:
                hits.append((k, i))
                break
    if not hits:
        raise DataError(f"prompt {prompt!r} names no known family ({', '.join(FAMILIES)})")
    return min(hits)[1]


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _fill(heights, size):
    z = np.arange(size)[:, None, None]
    return (z < heights[None]).astype(np.float64)


def generate_scene(family: str, rng, size: int = SCENE_SIZE) -> VoxelScene:
    s = size
    jitter = lambda: rng.normal(0.0, 0.03, (s, s, s, 3))  # noqa: E731
    if family == "hills":
        h = np.clip(np.rint(s * 0.22 + s * 0.14 * _smooth_noise(rng, (s, s), s / 8)), 2, s - 2)
        dens = _fill(h, s)
        base = np.array([0.25, 0.55, 0.2]) + rng.normal(0, 0.03, 3)
        rgb = base + jitter()
        z = np.arange(s)[:, None, None]
        top = (z >= h[None] - 2)[..., None]
        rgb = np.where(top, rgb + 0.12, rgb)
    elif family == "towers":
        h = np.full((s, s), max(2, s // 16), dtype=float)
        tall = np.zeros((s, s), bool)
        for _ in range(int(rng.integers(5, 10))):
            r = int(rng.integers(2, 4))
            cy, cx = rng.integers(r, s - r, 2)
            top = int(rng.integers(int(s * 0.4), int(s * 0.9)))
            h[cy - r:cy + r + 1, cx - r:cx + r + 1] = top
            tall[cy - r:cy + r + 1, cx - r:cx + r + 1] = True
        dens = _fill(h, s)
        ground = np.array([0.45, 0.45, 0.5])
        tower = np.array([0.7, 0.3, 0.25]) + rng.normal(0, 0.04, 3)
        rgb = np.where(tall[None, :, :, None], tower, ground) + jitter()
    elif family == "plains":
        h = np.clip(np.rint(s * 0.1 + 0.8 * _smooth_noise(rng, (s, s), s / 6)), 1, s - 2)
        dens = _fill(h, s)
        rgb = np.array([0.8, 0.75, 0.35]) + rng.normal(0, 0.03, 3) + jitter()
    else:
        family_label(family)
    rgb = np.clip(rgb, 0.0, 1.0) * dens[..., None]
    return VoxelScene(dens, rgb, family)


def gen_synthetic_scenes(families, count: int, seed: int, size: int = SCENE_SIZE) -> list[VoxelScene]:
    """``count`` scenes cycling through ``families``; scene ``i`` uses its own spawned stream."""
    families = list(families)
    for f in families:
        family_label(f)
    if count and not families:
        raise DataError("no scene families given")
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [generate_scene(families[i % len(families)], np.random.default_rng(seqs[i]), size)
            for i in range(count)]


def scene_statistics(scene: VoxelScene) -> dict[str, float]:
    h = scene.heights()
    return {"mean_height": float(h.mean() / scene.size), "height_std": float(h.std() / scene.size)}


# --- crop encoding ----------------------------------------------------------------


def encode_crop(scene: VoxelScene, origin, crop: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Occupancy fraction ``f (n,n,n)`` and mean occupied color ``rgb (n,n,n,3)`` of a cubic crop.

    The vertical origin may be negative: the scene's bottom layer extends downward.
    """
    origin = np.asarray(origin, int)
    if (origin[1:] < 0).any() or (origin + crop > scene.size).any():
        raise DataError(f"crop at {tuple(origin)} of size {crop} leaves the scene")
    cell = crop / n
    offs = (np.arange(n)[:, None] + np.array([0.25, 0.75])[None]) * cell
    # below the scene the bottom layer continues (solid ground)
    idx = [np.clip(origin[a] + np.floor(offs).astype(int).ravel(), 0, scene.size - 1) for a in range(3)]
    dens = scene.density[np.ix_(idx[0], idx[1], idx[2])].reshape(n, 2, n, 2, n, 2)
    col = scene.rgb[np.ix_(idx[0], idx[1], idx[2])].reshape(n, 2, n, 2, n, 2, 3)
    f = dens.mean((1, 3, 5))
    csum = (col * dens[..., None]).sum((1, 3, 5))
    cnt = dens.sum((1, 3, 5))[..., None]
    rgb = np.where(cnt > 0, csum / np.maximum(cnt, 1), 0.5)
    return f, rgb


def structure_latent(f: np.ndarray) -> DenseLatentGrid:
    return DenseLatentGrid((2.0 * f - 1.0)[..., None])


def appearance_features(f: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    u = np.concatenate([np.tanh(3.0 * (f - 0.5))[..., None], rgb - 0.5], -1)
    return u @ _Q.T


def appearance_targets(f: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    return np.concatenate([f[..., None], rgb], -1)


def active_of(f: np.ndarray) -> np.ndarray:
    return 2.0 * f - 1.0 > 0.0


def appearance_latent(f, rgb, positions=None) -> SparseLatent:
    n = f.shape
    if positions is None:
        positions = np.argwhere(active_of(f))
    positions = np.asarray(positions, np.int64).reshape(-1, 3)
    feats = appearance_features(f, rgb)[tuple(positions.T)]
    return SparseLatent(GridDims(*n, APP_CHANNELS), positions, feats)


def initial_decoders() -> ToyDecoders:
    """Occupancy sign decoder and the linearized inverse of the appearance encoder."""
    w = _Q @ np.diag([1.0 / 3.0, 1.0, 1.0, 1.0])
    return ToyDecoders(np.array([1.0]), 0.0, w, np.full(4, 0.5))


def crop_origin(scene: VoxelScene, crop: int, rng, anchor: str = "ground") -> np.ndarray:
    """Random horizontal origin; vertical origin 0 (``ground``) or around the surface (``surface``)."""
    s = scene.size
    if crop > s:
        raise DataError(f"crop size {crop} exceeds scene size {s}")
    oy, ox = rng.integers(0, s - crop + 1, 2)
    if anchor == "ground":
        oz = 0
    elif anchor == "surface":
        h = scene.heights()[oy:oy + crop, ox:ox + crop]
        mid = float(np.median(h))
        oz = int(min(round(mid - crop / 2 + rng.integers(-crop // 8, crop // 8 + 1)), s - crop))
    else:
        raise DataError(f"unknown crop anchor {anchor!r}")
    return np.array([oz, oy, ox])


def flow_datasets(scenes, n: int, crop: int, per_scene: int, rng):
    """Ground-anchored crops as (structure samples, appearance samples) for the two stages."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    s_set, l_set = [], []
    for sc in scenes:
        label = family_label(sc.family)
        for _ in range(per_scene):
            f, rgb = encode_crop(sc, crop_origin(sc, crop, rng), crop, n)
            s_set.append(FlowSample.from_dense(structure_latent(f), label))
            act = active_of(f)
            feats = np.where(act[..., None], appearance_features(f, rgb), 0.0)
            l_set.append(FlowSample(feats, act, label))
    return s_set, l_set


def decoder_crops(scenes, n: int, crop: int, per_scene: int, rng):
    """(appearance features, (density, rgb) targets) at active voxels of random crops."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    out = []
    for sc in scenes:
        for _ in range(per_scene):
            f, rgb = encode_crop(sc, crop_origin(sc, crop, rng), crop, n)
            act = active_of(f)
            out.append((appearance_features(f, rgb)[act], appearance_targets(f, rgb)[act]))
    return out
