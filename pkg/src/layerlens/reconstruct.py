"""Layer-stack reconstruction and surface-roughness metrology.

Masks are stacked into voxel volumes, part boundaries are traced and
unrolled into polar profiles r(θ) per layer, detrended into a height map
z(θ, layer) in µm, and summarized by Ra / Rq / Rz.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "stack_masks",
    "largest_contour",
    "polar_profile",
    "HeightMap",
    "detrend",
    "RoughnessReport",
    "roughness",
    "window_sweep",
    "heightmap_to_csv",
]

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class Volume:
    """Boolean voxel stack with physical scale metadata."""

    data: np.ndarray            # (layers, height, width) bool
    pitch_um: float = 20.0      # in-plane µm per pixel
    thickness_um: float = 30.0  # layer thickness, µm
    filled_layers: tuple[int, ...] = ()  # indices that were nearest-copies


def stack_masks(masks: list[np.ndarray | None], pitch_um: float = 20.0,
                thickness_um: float = 30.0) -> Volume:
    """Stack per-layer masks into a Volume.

    Absent layers (None) are filled with a copy of the nearest present layer
    (ties resolve to the lower index). All-absent input is an error.
    """
    if pitch_um <= 0 or thickness_um <= 0:
        raise ValueError("pitch_um and thickness_um must be positive")
    present = [i for i, m in enumerate(masks) if m is not None]
    if not present:
        raise ValueError("no present layers to stack")
    shape = np.asarray(masks[present[0]]).shape
    layers = []
    filled = []
    for i, m in enumerate(masks):
        if m is None:
            j = min(present, key=lambda p: (abs(p - i), p))
            layers.append(np.asarray(masks[j], dtype=bool))
            filled.append(i)
        else:
            a = np.asarray(m, dtype=bool)
            if a.shape != shape:
                raise ValueError(f"layer {i} shape {a.shape} != {shape}")
            layers.append(a)
    return Volume(data=np.stack(layers), pitch_um=pitch_um,
                  thickness_um=thickness_um, filled_layers=tuple(filled))


# ---------------------------------------------------------------------------
# Boundary tracing
# ---------------------------------------------------------------------------

# Moore neighborhood in clockwise order (row, col), starting north
_MOORE = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def largest_contour(mask: np.ndarray) -> np.ndarray:
    """Trace the outer boundary of the largest connected component.

    Returns an ordered closed polyline as an (N, 2) array of (x, y) pixel
    centers, produced by Moore-neighborhood tracing with Jacob's stopping
    criterion. 8-connectivity; an isolated pixel yields a single point.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got {m.shape}")
    if not m.any():
        raise ValueError("mask is empty")
    labels, n = ndimage.label(m, structure=EIGHT_CONNECTED)
    if n > 1:
        areas = ndimage.sum_labels(m, labels, index=np.arange(1, n + 1))
        m = labels == (int(np.argmax(areas)) + 1)
    # pad so neighbor lookups never leave the array
    p = np.pad(m, 1)
    ys, xs = np.nonzero(p)
    start = (int(ys[0]), int(xs[0]))  # topmost, then leftmost
    # the raster scan "entered" the start pixel from the west (background)
    current, backtrack = start, (start[0], start[1] - 1)
    contour: list[tuple[int, int]] = []
    seen: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    # the (current, backtrack) pair fully determines the next step; the
    # trace is complete when a pair repeats
    while (current, backtrack) not in seen:
        seen.add((current, backtrack))
        contour.append(current)
        base = _MOORE.index((backtrack[0] - current[0], backtrack[1] - current[1]))
        nxt = None
        for k in range(1, 9):
            off = _MOORE[(base + k) % 8]
            cand = (current[0] + off[0], current[1] + off[1])
            if p[cand]:
                nxt = cand
                break
            backtrack = cand
        if nxt is None:
            break  # isolated pixel
        current = nxt
    # drop padding offset, convert to (x, y)
    pts = np.array([(c[1] - 1, c[0] - 1) for c in contour], dtype=np.float64)
    return pts


# ---------------------------------------------------------------------------
# Polar profiles
# ---------------------------------------------------------------------------

def polar_profile(contour: np.ndarray, center: tuple[float, float],
                  n_theta: int = 720) -> np.ndarray:
    """Unroll a closed contour into r(θ) on a uniform angle grid.

    For each ray from `center` the radius is the distance to the *farthest*
    intersection with the contour polyline; angles with no intersection are
    NaN. θ = 0 points along +x and increases counterclockwise.
    """
    pts = np.asarray(contour, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise ValueError("contour must be a non-empty (N, 2) array")
    if n_theta < 4:
        raise ValueError(f"n_theta must be ≥ 4, got {n_theta}")
    cx, cy = center
    if pts.shape[0] == 1:
        r = math.hypot(pts[0, 0] - cx, pts[0, 1] - cy)
        out = np.full(n_theta, np.nan)
        if r == 0.0:
            out[:] = 0.0
            return out
        theta = math.atan2(pts[0, 1] - cy, pts[0, 0] - cx) % (2 * math.pi)
        out[int(round(theta / (2 * math.pi / n_theta))) % n_theta] = r
        return out
    p1 = pts
    p2 = np.roll(pts, -1, axis=0)
    e = p2 - p1                       # (M, 2) edge vectors
    q = p1 - np.array([cx, cy])       # (M, 2)
    thetas = 2.0 * np.pi * np.arange(n_theta) / n_theta
    d = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)  # (T, 2)
    # 2D cross products, broadcast over (T, M)
    dxe = d[:, 0:1] * e[None, :, 1] - d[:, 1:2] * e[None, :, 0]
    qxe = q[:, 0] * e[:, 1] - q[:, 1] * e[:, 0]              # (M,)
    qxd = q[None, :, 0] * d[:, 1:2] - q[None, :, 1] * d[:, 0:1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = qxe[None, :] / dxe
        s = qxd / dxe
    ok = (np.abs(dxe) > 1e-12) & (s >= 0.0) & (s <= 1.0) & (t > 1e-9)
    t = np.where(ok, t, np.nan)
    with warnings.catch_warnings():
        # rays that miss the contour are NaN by contract
        warnings.simplefilter("ignore", category=RuntimeWarning)
        r = np.nanmax(t, axis=1)
    return r


def _fill_circular_nans(row: np.ndarray) -> np.ndarray:
    """Linear interpolation across NaN runs, wrapping around the ends."""
    bad = np.isnan(row)
    if not bad.any():
        return row
    if bad.all():
        raise ValueError("profile has no measured samples")
    n = row.size
    idx = np.arange(n)
    good = ~bad
    # unwrap by tripling the domain so interpolation sees the wrap
    xg = np.concatenate([idx[good] - n, idx[good], idx[good] + n])
    yg = np.tile(row[good], 3)
    out = row.copy()
    out[bad] = np.interp(idx[bad], xg, yg)
    return out


@dataclass
class HeightMap:
    """Detrended boundary fluctuation z(θ, layer) in µm.

    Rows are layers, columns the θ grid; every row is mean-centered.
    """

    z: np.ndarray                 # (layers, n_theta) µm
    thetas: np.ndarray            # (n_theta,) radians
    layer_indices: tuple[int, ...]
    pitch_um: float
    window: int


def detrend(profiles: np.ndarray, window: int, pitch_um: float = 20.0,
            layer_indices: tuple[int, ...] | None = None) -> HeightMap:
    """Split r(θ) profiles into trend and fluctuation.

    The trend is a circular moving average of length `window` (odd); the
    returned height map is (raw - trend) scaled to µm and mean-centered per
    layer. NaN gaps are interpolated circularly before filtering.
    """
    r = np.asarray(profiles, dtype=np.float64)
    if r.ndim == 1:
        r = r[None, :]
    if r.ndim != 2:
        raise ValueError(f"profiles must be 1D or 2D, got shape {r.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and ≥ 1, got {window}")
    if window > r.shape[1]:
        raise ValueError(f"window {window} exceeds profile length {r.shape[1]}")
    if pitch_um <= 0:
        raise ValueError("pitch_um must be positive")
    filled = np.stack([_fill_circular_nans(row) for row in r])
    trend = ndimage.uniform_filter1d(filled, size=window, axis=1, mode="wrap")
    z = (filled - trend) * pitch_um
    z -= z.mean(axis=1, keepdims=True)
    n_theta = r.shape[1]
    if layer_indices is None:
        layer_indices = tuple(range(r.shape[0]))
    return HeightMap(
        z=z,
        thetas=2.0 * np.pi * np.arange(n_theta) / n_theta,
        layer_indices=tuple(layer_indices),
        pitch_um=pitch_um,
        window=window,
    )


# ---------------------------------------------------------------------------
# Roughness parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoughnessReport:
    ra: float
    rq: float
    rz: float
    n_peaks: int          # requested pairs
    n_peaks_used: int     # actually available extrema pairs
    limited: bool         # True when fewer extrema than requested


def _local_extrema(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Circular local maxima and minima values of each row, pooled."""
    left = np.roll(z, 1, axis=1)
    right = np.roll(z, -1, axis=1)
    peaks = z[(z > left) & (z >= right)]
    valleys = z[(z < left) & (z <= right)]
    return peaks, valleys


def roughness(height: HeightMap | np.ndarray, n_peaks: int = 5) -> RoughnessReport:
    """Ra, Rq and Rz of a height map.

    Ra is the mean absolute fluctuation, Rq the RMS, and Rz the mean of the
    `n_peaks` highest local peaks minus the `n_peaks` lowest local valleys,
    paired by rank. With fewer extrema available the report is computed from
    what exists and flagged.
    """
    z = height.z if isinstance(height, HeightMap) else np.asarray(height, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.size == 0:
        raise ValueError("height map is empty")
    if n_peaks < 1:
        raise ValueError(f"n_peaks must be ≥ 1, got {n_peaks}")
    ra = float(np.mean(np.abs(z)))
    rq = float(math.sqrt(np.mean(z**2)))
    peaks, valleys = _local_extrema(z)
    used = min(n_peaks, peaks.size, valleys.size)
    if used == 0:
        rz = 0.0
    else:
        top = np.sort(peaks)[-used:]
        bottom = np.sort(valleys)[:used]
        rz = float(np.mean(top[::-1] - bottom))
    return RoughnessReport(ra=ra, rq=rq, rz=rz, n_peaks=n_peaks,
                           n_peaks_used=used, limited=used < n_peaks)


def window_sweep(profiles: np.ndarray, windows: list[int], pitch_um: float = 20.0,
                 n_peaks: int = 5) -> list[tuple[int, RoughnessReport]]:
    """Roughness as a function of the detrend window."""
    out = []
    for w in windows:
        hm = detrend(profiles, window=w, pitch_um=pitch_um)
        out.append((w, roughness(hm, n_peaks=n_peaks)))
    return out


def heightmap_to_csv(height: HeightMap, path) -> None:
    """Write the height map as long-form CSV: theta, layer, z_um."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["theta", "layer", "z_um"])
        for li, layer in zip(height.layer_indices, height.z):
            for th, val in zip(height.thetas, layer):
                wr.writerow([f"{th:.6f}", li, f"{val:.6f}"])
