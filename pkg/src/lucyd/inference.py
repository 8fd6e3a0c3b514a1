"""Whole-volume LUCYD inference with overlapping, feathered tiles."""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from . import model
from .training import INTENSITY_SCALE, Checkpoint

MIN_OVERLAP = 8
# context voxels around each tile; the network's influence decays below 1e-7 beyond ~8 voxels
DEFAULT_HALO = 8


def _starts(n: int, tile: int, overlap: int) -> list[int]:
    if n <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return starts


def _ramp(length: int, overlap: int, left: bool, right: bool) -> np.ndarray:
    """1D blending weight; linear ramps only on sides that touch a neighbouring tile."""
    w = np.ones(length, dtype=np.float64)
    r = (np.arange(overlap, dtype=np.float64) + 1) / (overlap + 1)
    if left:
        w[:overlap] = np.minimum(w[:overlap], r)
    if right:
        w[length - overlap :] = np.minimum(w[length - overlap :], r[::-1])
    return w


def _forward(params: model.ModelParams, y: np.ndarray) -> np.ndarray:
    """x' for a normalised (d, h, w) block with even dims."""
    return model.forward(params, y[None].astype(np.float32)).restored.data[0]


def infer(
    ck: Checkpoint | model.ModelParams,
    y: np.ndarray,
    tile: Sequence[int] = (32, 64, 64),
    overlap: int = MIN_OVERLAP,
    scale: float = INTENSITY_SCALE,
    halo: int = DEFAULT_HALO,
) -> np.ndarray:
    """Restore a (d, h, w) or (1, d, h, w) volume on the 0-``scale`` intensity range.

    Volumes that fit in one tile run as a single forward pass. Larger ones are
    cut into tiles overlapping by ``overlap`` voxels and blended with linear
    feathering. Each tile is evaluated with ``halo`` extra voxels of
    surrounding context (clipped at the volume bounds) that are cropped away
    afterwards, so tile borders do not see artificial zero padding. Odd volume
    dims are edge-padded and cropped. The result is clamped at zero and
    returned with ``y``'s rank.
    """
    params = ck.params if isinstance(ck, Checkpoint) else ck
    tile = tuple(int(t) for t in tile)
    if len(tile) != 3 or any(t <= 0 or t % 2 for t in tile):
        raise ValueError(f"tile dims must be positive and even, got {tile}")
    if overlap < MIN_OVERLAP:
        raise ValueError(f"overlap must be at least {MIN_OVERLAP}, got {overlap}")
    if halo < 0 or halo % 2:
        raise ValueError(f"halo must be a non-negative even number, got {halo}")
    arr = np.asarray(y)
    vol = arr[0] if arr.ndim == 4 else arr
    if vol.ndim != 3 or (arr.ndim == 4 and arr.shape[0] != 1):
        raise ValueError(f"expected a single-channel volume, got shape {arr.shape}")
    if any(overlap >= t for t, n in zip(tile, vol.shape) if n > t):
        raise ValueError(f"overlap {overlap} must be smaller than the tile {tile}")
    shape = vol.shape
    yn = vol.astype(np.float32) / np.float32(scale)
    if any(n % 2 for n in shape):
        yn = np.pad(yn, [(0, n % 2) for n in shape], mode="edge")

    if all(n <= t for n, t in zip(yn.shape, tile)):
        out = _forward(params, yn)
    else:
        acc = np.zeros(yn.shape, dtype=np.float64)
        wsum = np.zeros(yn.shape, dtype=np.float64)
        per_axis = [_starts(n, t, overlap) for n, t in zip(yn.shape, tile)]
        for corner in itertools.product(*per_axis):
            sl, ctx, inner, ws = [], [], [], []
            for c, t, n, starts in zip(corner, tile, yn.shape, per_axis):
                length = min(t, n)
                lo, hi = max(0, c - halo), min(n, c + length + halo)
                sl.append(slice(c, c + length))
                ctx.append(slice(lo, hi))
                inner.append(slice(c - lo, c - lo + length))
                ws.append(_ramp(length, overlap, c != starts[0], c != starts[-1]))
            block = _forward(params, yn[tuple(ctx)])[tuple(inner)]
            w = ws[0][:, None, None] * ws[1][None, :, None] * ws[2][None, None, :]
            acc[tuple(sl)] += w * block
            wsum[tuple(sl)] += w
        out = acc / wsum
    out = out[: shape[0], : shape[1], : shape[2]]
    out = (np.maximum(out, 0.0) * scale).astype(np.float32)
    return out[None] if arr.ndim == 4 else out
