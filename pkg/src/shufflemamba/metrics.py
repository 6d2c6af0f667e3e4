"""Reference-based fusion quality metrics on [C, H, W] arrays.

All metrics take ``(pred, target)``; ERGAS normalizes by the target band means.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .net import ssim_tensor

METRIC_COLUMNS = ("image_id", "psnr", "ssim", "sam", "ergas")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"metric inputs disagree: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, peak=1.0, size=11, sigma=1.5):
    """Mean SSIM with an 11x11 Gaussian window, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < size:
        raise ValueError(f"SSIM window {size} is larger than the image {a.shape[-2:]}")
    with T.no_grad():
        return float(ssim_tensor(a[None], b[None], peak, size, sigma).data)


def sam(a, b):
    """Mean spectral angle (radians) over pixels; pixels with a zero spectrum are skipped."""
    a, b = _pair(a, b)
    if a.ndim != 3 or a.shape[0] < 2:
        raise ValueError("SAM needs a [C, H, W] image with C >= 2")
    va = a.reshape(a.shape[0], -1)
    vb = b.reshape(b.shape[0], -1)
    na = np.linalg.norm(va, axis=0)
    nb = np.linalg.norm(vb, axis=0)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        return 0.0
    ua, ub = va[:, ok] / na[ok], vb[:, ok] / nb[ok]
    # half-angle form stays accurate near 0, where arccos loses half the digits
    angle = 2.0 * np.arctan2(np.linalg.norm(ua - ub, axis=0), np.linalg.norm(ua + ub, axis=0))
    return float(np.mean(angle))


def ergas(a, b, ratio=4):
    """``(100 / ratio) * sqrt(mean_c (RMSE_c / mean(b_c))^2)``."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    mu = b.reshape(b.shape[0], -1).mean(axis=1)
    if np.any(mu == 0):
        raise ValueError("ERGAS undefined: reference band with zero mean")
    rmse = np.sqrt(((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1))
    return float(100.0 / ratio * np.sqrt(np.mean((rmse / mu) ** 2)))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    sam: float
    ergas: float

    @property
    def identical(self):
        return math.isinf(self.psnr)


def evaluate(pred, target, ratio=4, peak=1.0):
    return MetricReport(psnr(pred, target, peak), ssim(pred, target, peak),
                        sam(pred, target), ergas(pred, target, ratio))


def write_metrics_csv(path, rows):
    """``rows`` is an iterable of ``(image_id, MetricReport)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for image_id, rep in rows:
            w.writerow([image_id, f"{rep.psnr:.6f}", f"{rep.ssim:.6f}", f"{rep.sam:.6f}", f"{rep.ergas:.6f}"])
