"""Classic deconvolution baselines: Gaussian PSFs, FFT convolution, Wiener, Richardson-Lucy.

All solvers use circular (periodic) boundaries. Volumes may be passed either as
bare (d, h, w) arrays or as single-channel (1, d, h, w) arrays; the result has
the same rank and dtype as the input.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_RL_ITERS = 30
DEFAULT_NSR = 1e-2
RL_EPS = 1e-6


def default_radius(sigma) -> int:
    """PSF half-width covering three standard deviations of the widest axis."""
    return int(math.ceil(3.0 * float(np.max(sigma))))


def gaussian_psf(sigma, radius: int | None = None) -> np.ndarray:
    """Gaussian PSF sampled at voxel centres, normalised to unit sum.

    ``sigma`` is a scalar (isotropic) or a (z, y, x) triple. A zero sigma along
    an axis collapses that axis to a delta. The kernel side is ``2*radius + 1``.
    """
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    if np.any(sig < 0):
        raise ValueError(f"sigma must be non-negative, got {tuple(sig)}")
    if radius is None:
        radius = default_radius(sig)
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")

    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    profiles = []
    for s in sig:
        if s == 0:
            p = (offsets == 0).astype(np.float64)
        else:
            p = np.exp(-0.5 * (offsets / s) ** 2)
        profiles.append(p / p.sum())
    psf = profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]
    psf /= psf.sum()
    return psf.astype(np.float32)


def _as3d(x: np.ndarray, what: str = "volume") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError(f"{what} must be single-channel, got {x.shape[0]} channels")
        return x[0]
    if x.ndim != 3:
        raise ValueError(f"{what} must be (d, h, w) or (1, d, h, w), got shape {x.shape}")
    return x


def _restore(res: np.ndarray, like: np.ndarray) -> np.ndarray:
    like = np.asarray(like)
    dtype = like.dtype if np.issubdtype(like.dtype, np.floating) else np.float32
    res = res.astype(dtype)
    return res[None] if like.ndim == 4 else res


def psf_otf(psf: np.ndarray, shape) -> np.ndarray:
    """Real FFT of the PSF embedded in a zero volume with its centre at the origin."""
    psf = np.asarray(psf, dtype=np.float64)
    if any(k > n for k, n in zip(psf.shape, shape)):
        raise ValueError(f"PSF {psf.shape} is larger than volume {tuple(shape)}")
    padded = np.zeros(shape, dtype=np.float64)
    padded[: psf.shape[0], : psf.shape[1], : psf.shape[2]] = psf
    padded = np.roll(padded, [-(k // 2) for k in psf.shape], axis=(0, 1, 2))
    return np.fft.rfftn(padded)


def _apply_otf(x: np.ndarray, otf: np.ndarray) -> np.ndarray:
    return np.fft.irfftn(np.fft.rfftn(x) * otf, s=x.shape, axes=(0, 1, 2))


def _blur_pair(psf: np.ndarray, shape):
    """Forward and adjoint blur operators; a one-tap PSF is a plain scale, applied without the FFT."""
    psf = np.asarray(psf, dtype=np.float64)
    if psf.size == 1:
        c = float(psf.ravel()[0])
        scale = lambda x: x * c  # noqa: E731
        return scale, scale
    otf = psf_otf(psf, shape)
    otf_t = np.conj(otf)  # flipped kernel
    return (lambda x: _apply_otf(x, otf)), (lambda x: _apply_otf(x, otf_t))


def fft_convolve(x: np.ndarray, psf: np.ndarray) -> np.ndarray:
    """Circular convolution of a single-channel volume with ``psf``."""
    x3 = _as3d(x).astype(np.float64)
    return _restore(_apply_otf(x3, psf_otf(psf, x3.shape)), x)


def wiener(y: np.ndarray, psf: np.ndarray, nsr: float = DEFAULT_NSR) -> np.ndarray:
    """Wiener deconvolution ``conj(P) Y / (|P|^2 + nsr)``.

    Frequencies where the denominator vanishes (only possible with ``nsr == 0``)
    are set to zero.
    """
    if nsr < 0:
        raise ValueError(f"nsr must be non-negative, got {nsr}")
    y3 = _as3d(y).astype(np.float64)
    otf = psf_otf(psf, y3.shape)
    den = np.abs(otf) ** 2 + nsr
    filt = np.divide(np.conj(otf), den, out=np.zeros_like(otf), where=den > 0)
    return _restore(_apply_otf(y3, filt), y)


def richardson_lucy(
    y: np.ndarray,
    psf: np.ndarray,
    iters: int = DEFAULT_RL_ITERS,
    eps: float = RL_EPS,
    callback=None,
) -> np.ndarray:
    """Richardson-Lucy deconvolution started from the observation itself.

    ``z_k = z_{k-1} * ((y / max(z_{k-1} * K, eps)) * K^T)``. ``callback(k, z_k)``
    is invoked after every iteration if given.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    y3 = _as3d(y).astype(np.float64)
    if np.any(y3 < 0):
        raise ValueError("Richardson-Lucy needs a non-negative input")
    blur, blur_t = _blur_pair(psf, y3.shape)
    z = y3.copy()
    for k in range(1, iters + 1):
        ratio = y3 / np.maximum(blur(z), eps)
        z = z * blur_t(ratio)
        # circular FFT round-off can leave tiny negatives where y is zero
        np.maximum(z, 0.0, out=z)
        if callback is not None:
            callback(k, z)
    return _restore(z, y)


def poisson_loglik(y: np.ndarray, z: np.ndarray, psf: np.ndarray, eps: float = RL_EPS) -> float:
    """Poisson log-likelihood of ``y`` given the reblurred estimate ``z * K`` (constant terms dropped)."""
    y3 = _as3d(y).astype(np.float64)
    blurred = np.maximum(_as3d(fft_convolve(_as3d(z).astype(np.float64), psf)), eps)
    return float(np.sum(y3 * np.log(blurred) - blurred))
