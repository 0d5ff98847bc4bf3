"""Reconstruction quality scores: PSNR, single-scale SSIM, per-pixel MSE.

All functions accept (h, w) or (h, w, c) arrays with values nominally in
[0, peak]; RGB SSIM is the mean of per-channel SSIM. Pure functions, safe to
call from worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class ScoreReport:
    """One reconstruction's scores against one reference.

    ``psnr_db`` is ``float('inf')`` when the images match exactly.
    ``ssim_window_fallback`` marks scores computed with the small-image
    uniform window instead of the standard 11x11 Gaussian.
    """

    psnr_db: float
    ssim: float
    per_pixel_mse: float
    sign_resolved: bool = False
    ssim_window_fallback: bool = False


def _pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    return x, x_hat


def per_pixel_error(x, x_hat):
    """Mean squared error per pixel (squared l2 gap over element count)."""
    x, x_hat = _pair(x, x_hat)
    d = x - x_hat
    return float(np.mean(d * d))


def psnr(x, x_hat, peak=1.0):
    """10 log10(peak^2 / MSE); +inf when the images are identical."""
    if not peak > 0:
        raise ConfigError(f"peak must be > 0, got {peak}")
    mse = per_pixel_error(x, x_hat)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size, sigma):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_stats(img, window):
    # all sliding placements of the window, weighted moments per placement
    view = np.lib.stride_tricks.sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", view, window)


def _ssim_single(x, y, window, c1, c2):
    mu_x = _windowed_stats(x, window)
    mu_y = _windowed_stats(y, window)
    var_x = _windowed_stats(x * x, window) - mu_x * mu_x
    var_y = _windowed_stats(y * y, window) - mu_y * mu_y
    cov = _windowed_stats(x * y, window) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(x, x_hat, peak=1.0, return_details=False):
    """Single-scale structural similarity.

    Standard form: 11x11 Gaussian window (sigma 1.5), stability constants
    C1 = (0.01 peak)^2 and C2 = (0.03 peak)^2, averaged over all fully valid
    window placements. Images with a side shorter than the window fall back to
    a uniform window of side min(side, 7); ``return_details=True`` additionally
    returns whether that fallback fired.
    """
    if not peak > 0:
        raise ConfigError(f"peak must be > 0, got {peak}")
    x, x_hat = _pair(x, x_hat)
    if x.ndim == 2:
        x = x[:, :, None]
        x_hat = x_hat[:, :, None]
    if x.ndim != 3:
        raise DimensionError(f"expected (h, w) or (h, w, c) images, got {x.shape}")
    h, w = x.shape[:2]
    fallback = min(h, w) < SSIM_WINDOW
    if fallback:
        side = min(h, w, 7)
        window = np.full((side, side), 1.0 / (side * side))
    else:
        window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    vals = [_ssim_single(x[:, :, c], x_hat[:, :, c], window, c1, c2)
            for c in range(x.shape[2])]
    value = float(np.mean(vals))
    if return_details:
        return value, fallback
    return value


def resolve_sign(x_ref, x_hat):
    """Pick s in {+1, -1} minimizing ||x_ref - s x_hat||; ties go to +1.

    Magnitude measurements of a real signal cannot distinguish x from -x, so
    comparisons against a reference may optionally quotient out that sign.
    Returns (s * x_hat, s).
    """
    x_ref, x_hat = _pair(x_ref, x_hat)
    d_plus = np.sum((x_ref - x_hat) ** 2)
    d_minus = np.sum((x_ref + x_hat) ** 2)
    sign = 1 if d_plus <= d_minus else -1
    return sign * x_hat, sign


def score(x_ref, x_hat, peak=1.0, allow_sign_flip=False):
    """Bundle PSNR, SSIM and per-pixel MSE into one report.

    ``allow_sign_flip`` applies :func:`resolve_sign` first; off by default
    because generator outputs are not sign-symmetric.
    """
    x_ref, x_hat = _pair(x_ref, x_hat)
    flipped = False
    if allow_sign_flip:
        x_hat, sign = resolve_sign(x_ref, x_hat)
        flipped = True
    ssim_val, fallback = ssim(x_ref, x_hat, peak=peak, return_details=True)
    return ScoreReport(
        psnr_db=psnr(x_ref, x_hat, peak=peak),
        ssim=ssim_val,
        per_pixel_mse=per_pixel_error(x_ref, x_hat),
        sign_resolved=flipped,
        ssim_window_fallback=fallback,
    )
