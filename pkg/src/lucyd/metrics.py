"""PSNR, 3D SSIM (plain and differentiable) and parameter counting.

SSIM follows the usual Gaussian-window formulation (11-voxel window, sigma 1.5,
K1 = 0.01, K2 = 0.03) extended to three separable axes. Local statistics are
taken over "valid" window positions only, so the map is smaller than the input
by ``window - 1`` along each axis and no padding bias enters the score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volgrid import Tensor, emit


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def kernel1d(self) -> np.ndarray:
        if self.window % 2 == 0:
            raise ValueError("SSIM window side must be odd")
        r = np.arange(self.window, dtype=np.float64) - self.window // 2
        g = np.exp(-0.5 * (r / self.sigma) ** 2)
        return g / g.sum()


DEFAULT_SSIM = SsimParams()


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = np.mean((a - b) ** 2)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / err))


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    for axis in range(3):
        x = sliding_window_view(x, g.size, axis=axis) @ g
    return x


def _filter_adjoint(m: np.ndarray, g: np.ndarray) -> np.ndarray:
    # transpose of the valid filter: zero-pad to "full" and correlate with the flipped kernel
    p = g.size - 1
    gf = g[::-1]
    for axis in range(3):
        pad = [(0, 0)] * 3
        pad[axis] = (p, p)
        m = sliding_window_view(np.pad(m, pad), g.size, axis=axis) @ gf
    return m


def _as3d(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError(f"SSIM expects a single-channel volume, got {x.shape[0]} channels")
        x = x[0]
    if x.ndim != 3:
        raise ValueError(f"SSIM expects (d, h, w) or (1, d, h, w), got shape {x.shape}")
    return x


def _ssim_terms(a: np.ndarray, b: np.ndarray, params: SsimParams):
    if a.shape != b.shape:
        raise ValueError(f"ssim3d: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < params.window:
        raise ValueError(f"volume {a.shape} is smaller than the {params.window}-voxel SSIM window")
    g = params.kernel1d()
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    e_aa = _filter_valid(a * a, g)
    e_bb = _filter_valid(b * b, g)
    e_ab = _filter_valid(a * b, g)
    num1 = 2 * mu_a * mu_b + c1
    num2 = 2 * (e_ab - mu_a * mu_b) + c2
    den1 = mu_a**2 + mu_b**2 + c1
    den2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + c2
    smap = (num1 * num2) / (den1 * den2)
    return g, mu_a, mu_b, num1, num2, den1, den2, smap


def ssim3d(a, b, params: SsimParams = DEFAULT_SSIM) -> float:
    """Mean local SSIM between two single-channel volumes (computed in float64)."""
    a3 = _as3d(a).astype(np.float64)
    b3 = _as3d(b).astype(np.float64)
    return float(_ssim_terms(a3, b3, params)[-1].mean())


def ssim3d_op(a: Tensor, b: Tensor, params: SsimParams = DEFAULT_SSIM) -> Tensor:
    """Differentiable SSIM on the tape; same numbers as :func:`ssim3d`."""
    a3 = _as3d(a.data).astype(np.float64)
    b3 = _as3d(b.data).astype(np.float64)
    g, mu_a, mu_b, num1, num2, den1, den2, smap = _ssim_terms(a3, b3, params)
    value = np.asarray(smap.mean(), dtype=a.dtype)

    def grad_fn(gout):
        w = float(gout) / smap.size
        dd = den1 * den2
        # partials of the map w.r.t. the filtered moments mu_a, mu_b, E[aa], E[bb], E[ab]
        d_eab = w * 2 * num1 / dd
        d_eaa = -w * smap / den2
        common = w * 2 * (num2 - num1) / dd
        d_mu_a = common * mu_b - w * 2 * mu_a * smap * (1 / den1 - 1 / den2)
        d_mu_b = common * mu_a - w * 2 * mu_b * smap * (1 / den1 - 1 / den2)
        t_eab = _filter_adjoint(d_eab, g)
        t_sq = _filter_adjoint(d_eaa, g)  # d_ebb has the same form
        ga = gb = None
        if a.requires_grad:
            ga = _filter_adjoint(d_mu_a, g) + 2 * a3 * t_sq + b3 * t_eab
            ga = ga.reshape(a.shape).astype(a.dtype)
        if b.requires_grad:
            gb = _filter_adjoint(d_mu_b, g) + 2 * b3 * t_sq + a3 * t_eab
            gb = gb.reshape(b.shape).astype(b.dtype)
        return ga, gb

    return emit("ssim3d", (a, b), value, grad_fn)


def param_count(params: Mapping[str, np.ndarray]) -> int:
    """Total number of scalar entries over every weight and bias tensor."""
    return int(sum(np.asarray(v).size for v in params.values()))
