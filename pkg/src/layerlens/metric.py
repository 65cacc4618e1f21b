"""Image- and volume-level comparison metrics.

Scalar image metrics (MAE, PSNR, SSIM) operate on same-shape [0, 1] images;
geometry metrics (Hausdorff, volume IoU / mismatch) operate on point sets and
boolean layer stacks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial.distance import cdist

from .imgcore import as_image

__all__ = [
    "mae",
    "psnr",
    "SsimParams",
    "ssim",
    "hausdorff",
    "VolumeMetrics",
    "volume_metrics",
]


def _pair(img_a: np.ndarray, img_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_image(img_a), as_image(img_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean absolute error."""
    a, b = _pair(img_a, img_b)
    return float(np.mean(np.abs(a - b)))


def psnr(img_a: np.ndarray, img_b: np.ndarray, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    a, b = _pair(img_a, img_b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


@dataclass(frozen=True)
class SsimParams:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def validate(self) -> None:
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and ≥ 3, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0 or self.data_range <= 0:
            raise ValueError("k1, k2 and data_range must be positive")


def ssim(img_a: np.ndarray, img_b: np.ndarray,
         params: SsimParams = SsimParams()) -> float:
    """Mean structural similarity over uniform sliding windows.

    Local means/variances/covariance use a uniform window with reflect
    boundaries; the score is the average of the per-window SSIM map.
    """
    params.validate()
    a, b = _pair(img_a, img_b)
    if min(a.shape) < params.window:
        raise ValueError(f"image {a.shape} smaller than window {params.window}")
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2
    win = params.window

    def _f(x: np.ndarray) -> np.ndarray:
        return uniform_filter(x, size=win, mode="reflect")

    mu_a, mu_b = _f(a), _f(b)
    var_a = np.maximum(_f(a * a) - mu_a**2, 0.0)
    var_b = np.maximum(_f(b * b) - mu_b**2, 0.0)
    cov = _f(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def hausdorff(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Exact symmetric Hausdorff distance between two non-empty point sets.

    Points are rows of (x, y) coordinates; no approximation.
    """
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("point sets must be 2D arrays with matching dimension")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point sets must be non-empty")
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


@dataclass(frozen=True)
class VolumeMetrics:
    iou: float
    hausdorff_mean: float   # per-layer largest-contour Hausdorff, averaged
    mismatch: float         # |A xor B| / |B|


def volume_metrics(vol_a: np.ndarray, vol_b: np.ndarray) -> VolumeMetrics:
    """Voxel overlap metrics between two boolean layer stacks of equal shape.

    vol_b is the reference for the mismatch normalization
    V = |A xor B| / |B|. The per-layer Hausdorff term uses the largest
    boundary contour of each layer and averages over layers where both
    stacks have foreground.
    """
    from .reconstruct import largest_contour  # local import, cycle-free

    a = np.asarray(vol_a, dtype=bool)
    b = np.asarray(vol_b, dtype=bool)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"volumes must share a 3D shape: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    inter = np.logical_and(a, b).sum()
    iou = float(inter / union) if union > 0 else 1.0
    ref = b.sum()
    if ref == 0:
        raise ValueError("reference volume is empty")
    mismatch = float(np.logical_xor(a, b).sum() / ref)
    dists = []
    for la, lb in zip(a, b):
        if la.any() and lb.any():
            ca = largest_contour(la)
            cb = largest_contour(lb)
            dists.append(hausdorff(ca, cb))
    h = float(np.mean(dists)) if dists else 0.0
    return VolumeMetrics(iou=iou, hausdorff_mean=h, mismatch=mismatch)
