"""Orthographic top and side views of an occupancy grid."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def color_volume(occ_active: np.ndarray, latent=None, decoders=None) -> np.ndarray | None:
    """Dense ``(d, h, w, 3)`` decoded colors at active latent positions, or None."""
    if latent is None or decoders is None:
        return None
    vol = np.zeros(occ_active.shape + (3,))
    if len(latent):
        vol[tuple(latent.positions.T)] = decoders.appearance(latent.features)[:, 1:4]
    return vol


def _resize(img: np.ndarray, size) -> np.ndarray:
    if size is None:
        return img
    H, W = size
    h, w = img.shape[:2]
    iy = (np.arange(H) * h) // H
    ix = (np.arange(W) * w) // W
    return img[np.ix_(iy, ix)]


def top_view(active: np.ndarray, colors=None, size=None) -> np.ndarray:
    """Highest occupied voxel per column; colored, or shaded by height when no colors are given."""
    active = np.asarray(active, bool)
    if active.ndim != 3:
        raise DataError("top view needs a 3-D occupancy grid")
    d = active.shape[0]
    any_ = active.any(0)
    top = d - 1 - np.argmax(active[::-1], axis=0)
    if colors is None:
        shade = (top + 1) / d
        img = np.repeat(shade[..., None], 3, -1)
    else:
        yy, xx = np.indices(top.shape)
        img = colors[top, yy, xx]
    img = np.where(any_[..., None], img, 0.0)
    return _resize(img, size)


def side_view(active: np.ndarray, colors=None) -> np.ndarray:
    """First occupied voxel looking along +y; image row 0 is the top of the grid."""
    active = np.asarray(active, bool)
    h = active.shape[1]
    any_ = active.any(1)
    first = np.argmax(active, axis=1)
    if colors is None:
        shade = 1.0 - first / h
        img = np.repeat(shade[..., None], 3, -1)
    else:
        zz, xx = np.indices(first.shape)
        img = colors[zz, first, xx]
    img = np.where(any_[..., None], img, 0.0)
    return img[::-1]
