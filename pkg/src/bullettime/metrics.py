"""PSNR and SSIM for [0, 1] float images."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) over (optionally masked) pixels; exact match -> 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    err = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("psnr: mask selects no pixels")
        err = err[mask]
    mse = err.mean()
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window) - half
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter2_valid(img: np.ndarray, kernel1d: np.ndarray) -> np.ndarray:
    """Separable 'valid' convolution with a symmetric 1-D kernel."""
    w = len(kernel1d)
    win_r = np.lib.stride_tricks.sliding_window_view(img, w, axis=0)
    tmp = win_r @ kernel1d
    win_c = np.lib.stride_tricks.sliding_window_view(tmp, w, axis=1)
    return win_c @ kernel1d


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
         k1: float = SSIM_K1, k2: float = SSIM_K2,
         sigma: float = SSIM_SIGMA) -> float:
    """Mean local SSIM with a Gaussian window, dynamic range 1.0.

    Multi-channel images are scored per channel and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(
            f"image {a.shape[:2]} smaller than the {window}x{window} window"
        )
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    kern = _gaussian_kernel(window, sigma)
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _filter2_valid(x, kern)
        mu_y = _filter2_valid(y, kern)
        xx = _filter2_valid(x * x, kern) - mu_x ** 2
        yy = _filter2_valid(y * y, kern) - mu_y ** 2
        xy = _filter2_valid(x * y, kern) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        scores.append((num / den).mean())
    return float(np.mean(scores))


def evaluation_report(pairs: list[dict]) -> dict:
    """Aggregate per-view scores: pairs carry {frame, cam, psnr, ssim}."""
    return {
        "per_view": pairs,
        "mean_psnr": float(np.mean([p["psnr"] for p in pairs])),
        "mean_ssim": float(np.mean([p["ssim"] for p in pairs])),
    }
