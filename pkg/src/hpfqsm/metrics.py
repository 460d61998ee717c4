"""Reconstruction quality metrics for 3D susceptibility maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

PSNR_CAP_DB = 300.0
SSIM_WINDOW = 7
HFEN_SIGMA = 1.5
HFEN_SUPPORT = 15


def _pair(x_hat, x_ref):
    a = np.asarray(getattr(x_hat, "data", x_hat), dtype=np.float64)
    b = np.asarray(getattr(x_ref, "data", x_ref), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    for v in (x_hat, x_ref):
        if hasattr(v, "grid") and hasattr(x_ref, "grid") and v.grid != x_ref.grid:
            raise ValueError("grid mismatch")
    return a, b


def _range(ref: np.ndarray) -> float:
    r = float(ref.max() - ref.min())
    if r <= 0:
        raise ValueError("reference has zero dynamic range")
    return r


def rmse(x_hat, x_ref) -> float:
    """Normalised RMSE in percent: ``100 * |x_hat - x_ref| / |x_ref|``."""
    a, b = _pair(x_hat, x_ref)
    denom = np.linalg.norm(b)
    if denom == 0:
        raise ValueError("reference has zero norm")
    return float(100.0 * np.linalg.norm(a - b) / denom)


def psnr(x_hat, x_ref) -> float:
    """PSNR in dB against the reference range; identical inputs give 300 dB."""
    a, b = _pair(x_hat, x_ref)
    peak = _range(b)
    err = float(np.sqrt(np.mean((a - b) ** 2)))
    if err == 0:
        return PSNR_CAP_DB
    return float(min(20.0 * np.log10(peak / err), PSNR_CAP_DB))


def ssim3d(x_hat, x_ref, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM with a cubic uniform window.

    Both volumes are shifted by the reference minimum so the reference spans
    ``[0, L]``; only windows lying fully inside the volume are averaged.
    """
    a, b = _pair(x_hat, x_ref)
    L = _range(b)
    lo = b.min()
    a, b = a - lo, b - lo
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mean = lambda v: ndimage.uniform_filter(v, size=window, mode="reflect")
    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a**2
    var_b = mean(b * b) - mu_b**2
    cov = mean(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    h = window // 2
    core = tuple(slice(h, n - h) if n > 2 * h else slice(None) for n in smap.shape)
    return float(np.clip(np.mean(smap[core]), -1.0, 1.0))


def log_kernel(sigma: float = HFEN_SIGMA, support: int = HFEN_SUPPORT) -> np.ndarray:
    """Zero-sum 3D Laplacian-of-Gaussian kernel."""
    r = np.arange(support) - (support - 1) / 2.0
    z, y, x = np.meshgrid(r, r, r, indexing="ij")
    r2 = x**2 + y**2 + z**2
    g = np.exp(-r2 / (2 * sigma**2))
    g /= g.sum()
    k = g * (r2 - 3 * sigma**2) / sigma**4
    return k - k.mean()


def log_filter(v: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h = kernel.shape[0] // 2
    padded = np.pad(v, h, mode="edge")
    return signal.fftconvolve(padded, kernel, mode="valid")


def hfen(x_hat, x_ref, sigma: float = HFEN_SIGMA, support: int = HFEN_SUPPORT, crop: int = 0) -> float:
    """``|LoG(x_hat) - LoG(x_ref)| / |LoG(x_ref)|``, optionally on the
    interior left after trimming ``crop`` voxels from every face."""
    a, b = _pair(x_hat, x_ref)
    k = log_kernel(sigma, support)
    la, lb = log_filter(a, k), log_filter(b, k)
    if crop:
        core = tuple(slice(crop, n - crop) for n in la.shape)
        la, lb = la[core], lb[core]
    denom = np.linalg.norm(lb)
    if denom == 0:
        raise ValueError("LoG of the reference vanishes")
    return float(np.linalg.norm(la - lb) / denom)


def roi_means(x, labels: np.ndarray, ids=None) -> dict[int, float]:
    """Mean of ``x`` over every labelled region (all nonzero ids by default)."""
    data = np.asarray(getattr(x, "data", x), dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != data.shape:
        raise ValueError("label map shape differs from volume")
    if ids is None:
        ids = [int(i) for i in np.unique(labels) if i != 0]
    out = {}
    for i in ids:
        sel = labels == i
        if not sel.any():
            raise ValueError(f"ROI {i} is empty")
        out[int(i)] = float(data[sel].mean())
    return out


@dataclass
class MetricsReport:
    rmse: float
    psnr: float
    ssim: float
    hfen: float
    roi: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0 or self.rmse < 0 or self.hfen < 0:
            raise ValueError("metric values out of range")


def evaluate(x_hat, x_ref, labels=None) -> MetricsReport:
    roi = roi_means(x_hat, labels) if labels is not None and np.any(labels) else {}
    return MetricsReport(rmse(x_hat, x_ref), psnr(x_hat, x_ref), ssim3d(x_hat, x_ref), hfen(x_hat, x_ref), roi)
