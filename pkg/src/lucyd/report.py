"""Method comparison over a dataset manifest and the CSV reports built from it."""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import classic, inference, metrics, model, simulate
from .io import save_volume
from .training import INTENSITY_SCALE

METHODS = ("input", "wiener", "rl", "lucyd")


@dataclass(frozen=True)
class Score:
    volume: int
    method: str
    sigma_b: float
    sigma_axial: float | None
    sigma_n: float
    ssim: float
    psnr: float

    @property
    def cell(self) -> tuple[float, float | None, float]:
        return (self.sigma_b, self.sigma_axial, self.sigma_n)


def restore(
    method: str,
    y: np.ndarray,
    psf_sigma,
    params: model.ModelParams | None = None,
    nsr: float = classic.DEFAULT_NSR,
    iters: int = classic.DEFAULT_RL_ITERS,
    tile: Sequence[int] = (32, 64, 64),
    overlap: int = inference.MIN_OVERLAP,
) -> np.ndarray:
    """Restore a 0-255 (d, h, w) volume with one of :data:`METHODS`."""
    if method == "input":
        return np.asarray(y, dtype=np.float32)
    if method == "wiener":
        return classic.wiener(y, classic.gaussian_psf(psf_sigma), nsr)
    if method == "rl":
        return classic.richardson_lucy(y, classic.gaussian_psf(psf_sigma), iters)
    if method == "lucyd":
        if params is None:
            raise ValueError("lucyd needs trained parameters (a checkpoint)")
        return inference.infer(params, y, tile, overlap)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def evaluate(
    manifest: simulate.Manifest,
    params: model.ModelParams | None,
    nsr: float = classic.DEFAULT_NSR,
    iters: int = classic.DEFAULT_RL_ITERS,
    tile: Sequence[int] = (32, 64, 64),
    overlap: int = inference.MIN_OVERLAP,
    save_dir: str | Path | None = None,
) -> list[Score]:
    """Per-volume SSIM/PSNR of every method on normalised volumes.

    Baselines are non-blind: they get the Gaussian PSF each volume was
    degraded with. ``lucyd`` is skipped when ``params`` is None. With
    ``save_dir`` every restored volume is written as ``<method>_<index>.lvol``.
    """
    methods = [m for m in METHODS if m != "lucyd" or params is not None]
    if save_dir is not None:
        Path(save_dir).mkdir(parents=True, exist_ok=True)
    scores = []
    for k, (entry, deg, gt) in enumerate(simulate.iter_pairs(manifest)):
        d = entry.degradation
        truth = gt / np.float32(INTENSITY_SCALE)
        for m in methods:
            out = restore(m, deg, d.blur_sigma, params, nsr, iters, tile, overlap)
            if save_dir is not None:
                save_volume(Path(save_dir) / f"{m}_{k:04d}.lvol", out)
            pred = np.asarray(out, dtype=np.float32) / np.float32(INTENSITY_SCALE)
            scores.append(
                Score(k, m, d.sigma_b, d.sigma_axial, d.sigma_n, metrics.ssim3d(pred, truth), metrics.psnr(pred, truth))
            )
    return scores


def cell_means(scores: Iterable[Score]) -> dict[tuple, dict[str, tuple[float, float]]]:
    """{cell: {method: (mean ssim, mean psnr)}} with volume-level averaging, cells in first-seen order."""
    acc: dict[tuple, dict[str, list]] = {}
    for s in scores:
        acc.setdefault(s.cell, {}).setdefault(s.method, []).append((s.ssim, s.psnr))
    return {
        cell: {m: (float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals]))) for m, vals in per.items()}
        for cell, per in acc.items()
    }


def fmt(v: float | None) -> str:
    """Six significant digits, '.' decimal, no grouping."""
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6g}"


def _cell_cols(cells) -> list[str]:
    anisotropic = any(c[1] is not None for c in cells)
    return ["sigma_b", "sigma_axial", "sigma_n"] if anisotropic else ["sigma_b", "sigma_n"]


def _cell_vals(cell, cols) -> list[str]:
    sb, sa, sn = cell
    return [fmt(sb)] + ([fmt(sa)] if "sigma_axial" in cols else []) + [fmt(sn)]


def _to_text(rows: list[list[str]]) -> str:
    buf = _io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def wide_csv(scores: Sequence[Score]) -> str:
    """One row per degradation cell, ``<method>_ssim`` / ``<method>_psnr`` columns."""
    means = cell_means(scores)
    methods = [m for m in METHODS if any(m in per for per in means.values())]
    cols = _cell_cols(list(means))
    rows = [cols + [f"{m}_{k}" for m in methods for k in ("ssim", "psnr")]]
    for cell, per in means.items():
        rows.append(_cell_vals(cell, cols) + [fmt(x) for m in methods for x in per[m]])
    return _to_text(rows)


def long_csv(scores: Sequence[Score]) -> str:
    """``method,sigma_b,sigma_n,ssim,psnr`` rows (cell means)."""
    means = cell_means(scores)
    cols = _cell_cols(list(means))
    rows = [["method"] + cols + ["ssim", "psnr"]]
    for m in METHODS:
        for cell, per in means.items():
            if m in per:
                rows.append([m] + _cell_vals(cell, cols) + [fmt(per[m][0]), fmt(per[m][1])])
    return _to_text(rows)


def volume_csv(scores: Sequence[Score]) -> str:
    """Unaveraged per-volume scores."""
    cols = _cell_cols([s.cell for s in scores])
    rows = [["volume", "method"] + cols + ["ssim", "psnr"]]
    for s in scores:
        rows.append([str(s.volume), s.method] + _cell_vals(s.cell, cols) + [fmt(s.ssim), fmt(s.psnr)])
    return _to_text(rows)


# projections

PGM_MAXVAL = 65535
PROJECTION_AXES = {"lateral": 0, "axial": 1}


def max_projection(vol: np.ndarray, axis: str) -> np.ndarray:
    """Maximum-intensity projection of a (d, h, w) volume.

    ``lateral`` collapses depth (an h x w image); ``axial`` collapses height
    (a d x w image showing the optical-axis profile).
    """
    if axis not in PROJECTION_AXES:
        raise ValueError(f"axis must be one of {sorted(PROJECTION_AXES)}, got {axis!r}")
    v = np.asarray(vol)
    if v.ndim == 4:
        if v.shape[0] != 1:
            raise ValueError(f"expected a single-channel volume, got shape {v.shape}")
        v = v[0]
    return v.max(axis=PROJECTION_AXES[axis])


def to_uint16(img: np.ndarray) -> np.ndarray:
    """Linear min-max scaling to 0..65535 (a constant image maps to 0)."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint16)
    return np.rint((img - lo) / (hi - lo) * PGM_MAXVAL).astype(np.uint16)


def pgm_bytes(img16: np.ndarray) -> bytes:
    """Binary PGM (P5), maxval 65535, big-endian samples."""
    h, w = img16.shape
    return f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii") + np.ascontiguousarray(img16, dtype=">u2").tobytes()
