"""Image quality metrics and the Gaussian-count memory proxy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError

PSNR_IDENTICAL = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical images give 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * np.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = len(k)
    tmp = sliding_window_view(img, n, axis=0) @ k
    return sliding_window_view(tmp, n, axis=1) @ k


def _filter_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Transpose of :func:`_filter_valid` (a 'full' correlation with the symmetric kernel)."""
    pad = len(k) - 1
    return _filter_valid(np.pad(g, pad), k[::-1])


def _gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim_with_grad(a, b, need_grad: bool = True):
    """Mean single-scale SSIM of two grayscale images and its gradient w.r.t. ``a``."""
    a, b = _check_pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise InvalidInputError(f"SSIM needs 2D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    k = gaussian_window()
    C1, C2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    e_aa, e_bb, e_ab = _filter_valid(a * a, k), _filter_valid(b * b, k), _filter_valid(a * b, k)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + C1
    n2 = 2 * cov + C2
    d1 = mu_a**2 + mu_b**2 + C1
    d2 = var_a + var_b + C2
    smap = n1 * n2 / (d1 * d2)
    value = float(smap.mean())
    if not need_grad:
        return value, None
    scale = 1.0 / smap.size
    dS_dcov = 2 * n1 / (d1 * d2)
    dS_dvar = -smap / d2
    dS_dmu = 2 * mu_b * n2 / (d1 * d2) - 2 * mu_a * smap / d1 - 2 * mu_a * dS_dvar - mu_b * dS_dcov
    grad = (_filter_adjoint(dS_dmu * scale, k)
            + 2 * a * _filter_adjoint(dS_dvar * scale, k)
            + b * _filter_adjoint(dS_dcov * scale, k))
    return value, grad


def ssim(a, b) -> float:
    """SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, range 1) on channel-mean gray."""
    a, b = _check_pair(a, b)
    return ssim_with_grad(_gray(a), _gray(b), need_grad=False)[0]


@dataclass
class MetricReport:
    psnr_db: Optional[float] = None
    ssim: Optional[float] = None
    gaussian_counts: Dict[str, int] = field(default_factory=dict)
    peak_resident_gaussians: int = 0

    def to_text(self) -> str:
        lines = []
        if self.psnr_db is not None:
            lines.append(f"psnr_db={self.psnr_db:.4f}")
        if self.ssim is not None:
            lines.append(f"ssim={self.ssim:.6f}")
        for k, v in self.gaussian_counts.items():
            lines.append(f"gaussians_{k}={v}")
        lines.append(f"peak_resident_gaussians={self.peak_resident_gaussians}")
        return "\n".join(lines) + "\n"


def memory_report(locals_, global_cloud, training_logs: Sequence[Sequence[dict]]) -> MetricReport:
    """Per-region and global Gaussian counts plus the largest per-region training peak.

    ``training_logs[i]`` is region i's metrics log: a sequence of rows with a
    ``gaussians`` entry (and optionally ``peak_gaussians``).
    """
    counts = {f"region_{i}": len(c) for i, c in enumerate(locals_)}
    if global_cloud is not None:
        counts["global"] = len(global_cloud)
    peaks = []
    for log in training_logs:
        vals = [int(r.get("peak_gaussians", r["gaussians"])) for r in log]
        peaks.append(max(vals) if vals else 0)
    return MetricReport(gaussian_counts=counts, peak_resident_gaussians=max(peaks) if peaks else 0)
