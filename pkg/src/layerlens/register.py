"""Part localization and frame-to-frame registration.

Circular part cross-sections are detected with a gradient-direction Hough
transform, boxed with a margin, and center correspondences between frames
are interpolated into a dense deformation map (inverse-distance weighting)
that warps one frame onto the other.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .imgcore import as_image

__all__ = [
    "Circle",
    "PartBox",
    "otsu_threshold",
    "hough_circles",
    "inscribe_boxes",
    "DeformationMap",
    "build_deformation_map",
    "apply_deformation",
    "save_deformation_map",
    "load_deformation_map",
]


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float
    score: float  # fraction of the perimeter with radially aligned edge support


@dataclass(frozen=True)
class PartBox:
    part_id: int
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty input")
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w = hist.astype(np.float64)
    p = w / w.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(img)
    return gx, gy


def hough_circles(
    img: np.ndarray,
    r_min: int,
    r_max: int,
    vote_threshold: float = 0.5,
) -> list[Circle]:
    """Detect circles by arc-restricted Hough voting with perimeter checks.

    The edge set is the gradient magnitude thresholded at its Otsu level;
    each edge pixel votes for candidate centers r_min..r_max away along an
    arc around the ±gradient direction (rough part boundaries bend the
    local normal, so a single ray would miss the true center). The pooled
    accumulator only ranks candidates; each candidate is then scored by
    walking its circumference and counting the fraction of samples whose
    nearest edge pixel lies within a small gap and carries a radially
    aligned gradient (sign fixed by the inside/outside intensity ranking).
    That fraction is bounded by 1 and comparable across radii, so
    vote_threshold ∈ (0, 1] is the minimum supported fraction to keep a
    circle. Kept circles are non-overlapping (center distance > r_min) and
    sorted by score descending.
    """
    a = as_image(img)
    if not (1 <= r_min <= r_max):
        raise ValueError(f"need 1 ≤ r_min ≤ r_max, got {r_min}, {r_max}")
    if not 0.0 < vote_threshold <= 1.0:
        raise ValueError(f"vote_threshold must be in (0, 1], got {vote_threshold}")
    h, w = a.shape
    gx, gy = _gradients(a)
    mag = np.hypot(gx, gy)
    if mag.max() <= 1e-12:
        return []
    level = otsu_threshold(mag)
    ey, ex = np.nonzero(mag > level)
    if ex.size == 0:
        return []
    theta = np.arctan2(gy[ey, ex], gx[ey, ex])

    half_arc = 0.7  # radians to each side of the gradient direction
    radii = np.arange(r_min, r_max + 1)
    acc = np.zeros((radii.size, h, w), dtype=np.float64)
    for ri, r in enumerate(radii):
        n_arc = max(5, int(math.ceil(half_arc * r)))  # ~2 px sample spacing
        phis = np.linspace(-half_arc, half_arc, n_arc)
        phis = np.concatenate([phis, phis + np.pi])  # both gradient senses
        ang = theta[:, None] + phis[None, :]
        cx = np.rint(ex[:, None] + r * np.cos(ang)).astype(int).ravel()
        cy = np.rint(ey[:, None] + r * np.sin(ang)).astype(int).ravel()
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        np.add.at(acc[ri], (cy[ok], cx[ok]), 1.0)

    # pool votes over nearby radii and a 3x3 spatial neighborhood to absorb
    # boundary roughness; pooled votes only rank candidates for verification
    from scipy.ndimage import distance_transform_edt, uniform_filter
    pooled = uniform_filter(acc, size=(5, 3, 3), mode="constant")
    perim = 2.0 * np.pi * radii

    # nearest edge pixel for every position, for the circumference walk
    edge = np.zeros((h, w), dtype=bool)
    edge[ey, ex] = True
    nearest = distance_transform_edt(~edge, return_distances=False,
                                     return_indices=True)

    align_tol = math.cos(0.6)  # edge gradient vs circle normal, radians
    max_gap = 2.5  # px between a perimeter sample and its nearest edge

    def _support(cx: float, cy: float, r: float) -> float:
        n = max(32, int(math.ceil(2.0 * np.pi * r)))
        phi = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        ux, uy = np.cos(phi), np.sin(phi)
        px, py = cx + r * ux, cy + r * uy
        pxi = np.clip(np.rint(px), 0, w - 1).astype(int)
        pyi = np.clip(np.rint(py), 0, h - 1).astype(int)
        ner, nec = nearest[0, pyi, pxi], nearest[1, pyi, pxi]
        gap = np.hypot(ner - py, nec - px)
        egx, egy = gx[ner, nec], gy[ner, nec]
        emag = np.hypot(egx, egy)
        # the gradient points toward the brighter side of the boundary
        rin, rout = max(r - 3.0, 0.5 * r), r + 3.0
        ixi = np.clip(np.rint(cx + rin * ux), 0, w - 1).astype(int)
        iyi = np.clip(np.rint(cy + rin * uy), 0, h - 1).astype(int)
        oxi = np.clip(np.rint(cx + rout * ux), 0, w - 1).astype(int)
        oyi = np.clip(np.rint(cy + rout * uy), 0, h - 1).astype(int)
        pol = -1.0 if float(a[iyi, ixi].mean()) >= float(a[oyi, oxi].mean()) else 1.0
        inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
        cosd = pol * (egx * ux + egy * uy) / np.maximum(emag, 1e-12)
        hit = inside & (gap <= max_gap) & (emag > 1e-12) & (cosd >= align_tol)
        return float(np.count_nonzero(hit)) / float(n)

    found: list[Circle] = []
    rejected: list[tuple[float, float]] = []
    flat = pooled.reshape(radii.size, -1)
    best_r = np.argmax(flat, axis=0)
    cell = flat[best_r, np.arange(flat.shape[1])]
    # raw arc votes concentrate several-fold above one vote per boundary
    # pixel, so this floor only prunes hopeless candidates cheaply
    cand = np.nonzero(cell * (5.0 * 9.0) >= vote_threshold * perim[best_r])[0]
    if cand.size == 0:
        return []
    order = cand[np.argsort(cell[cand])[::-1]][:2048]
    shadow = max(2.0, 0.5 * r_min)
    for idx in order:
        ri = int(best_r[idx])
        cy0, cx0 = divmod(int(idx), w)
        if any(math.hypot(c.cx - cx0, c.cy - cy0) <= r_min for c in found):
            continue
        if any(math.hypot(rx - cx0, ry - cy0) <= shadow for rx, ry in rejected):
            continue
        # sub-pixel center and sub-bin radius from the vote mass around the peak
        y0, y1 = max(cy0 - 2, 0), min(cy0 + 3, h)
        x0, x1 = max(cx0 - 2, 0), min(cx0 + 3, w)
        win = pooled[ri, y0:y1, x0:x1]
        wy, wx = np.mgrid[y0:y1, x0:x1]
        tot = float(win.sum())
        cxf = float((win * wx).sum() / tot) if tot > 0 else float(cx0)
        cyf = float((win * wy).sum() / tot) if tot > 0 else float(cy0)
        r0, r1 = max(ri - 2, 0), min(ri + 3, radii.size)
        rw = pooled[r0:r1, cy0, cx0]
        rt = float(rw.sum())
        rf = float((rw * radii[r0:r1]).sum() / rt) if rt > 0 else float(radii[ri])
        s = _support(cxf, cyf, rf)
        if s >= vote_threshold:
            found.append(Circle(cx=cxf, cy=cyf, r=rf, score=s))
        else:
            rejected.append((cxf, cyf))
    found.sort(key=lambda c: c.score, reverse=True)
    return found


def inscribe_boxes(
    circles: list[Circle],
    margin: int,
    bounds: tuple[int, int],
) -> list[PartBox]:
    """Axis-aligned boxes around circles with a margin, clamped to bounds.

    bounds is (height, width); part ids follow the input (score) order.
    """
    if margin < 0:
        raise ValueError(f"margin must be ≥ 0, got {margin}")
    h, w = bounds
    boxes = []
    for i, c in enumerate(circles):
        x0 = max(int(math.floor(c.cx - c.r - margin)), 0)
        y0 = max(int(math.floor(c.cy - c.r - margin)), 0)
        x1 = min(int(math.ceil(c.cx + c.r + margin)) + 1, w)
        y1 = min(int(math.ceil(c.cy + c.r + margin)) + 1, h)
        boxes.append(PartBox(part_id=i, x0=x0, y0=y0, x1=x1, y1=y1))
    return boxes


# ---------------------------------------------------------------------------
# Deformation maps
# ---------------------------------------------------------------------------

@dataclass
class DeformationMap:
    """Dense per-pixel displacement field (dx, dy), pixels."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ValueError("dx and dy must share a 2D shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape


def build_deformation_map(
    src_centers: np.ndarray,
    dst_centers: np.ndarray,
    out_size: tuple[int, int],
) -> DeformationMap:
    """Interpolate sparse center displacements into a dense field.

    Inverse-distance weighting with power 2, anchored at the source centers;
    exact at the control points. A single control yields a constant field.
    """
    src = np.asarray(src_centers, dtype=np.float64)
    dst = np.asarray(dst_centers, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise ValueError("src and dst must be matching (N, 2) arrays")
    if src.shape[0] == 0:
        raise ValueError("need at least one control point")
    h, w = out_size
    disp = dst - src  # (N, 2) displacement per control
    xs = np.arange(w, dtype=np.float64)[None, :, None]  # (1, W, 1)
    ys = np.arange(h, dtype=np.float64)[:, None, None]  # (H, 1, 1)
    d2 = (xs - src[None, None, :, 0]) ** 2 + (ys - src[None, None, :, 1]) ** 2
    with np.errstate(divide="ignore"):
        wgt = 1.0 / d2
    # exact interpolation at control points
    hit = d2 <= 1e-18
    any_hit = hit.any(axis=2)
    wgt = np.where(hit, 1.0, np.where(any_hit[:, :, None], 0.0, wgt))
    wsum = wgt.sum(axis=2)
    dx = (wgt * disp[None, None, :, 0]).sum(axis=2) / wsum
    dy = (wgt * disp[None, None, :, 1]).sum(axis=2) / wsum
    return DeformationMap(dx=dx, dy=dy)


def apply_deformation(
    img: np.ndarray,
    dmap: DeformationMap,
    direction: str = "forward",
    fill: float | None = None,
) -> np.ndarray:
    """Warp by inverse sampling: out(p) = img(p ± d(p)), bilinear.

    direction="forward" samples at p + d(p); "inverse" negates the field.
    Out-of-bounds samples take `fill` (image mean when None).
    """
    a = as_image(img)
    if dmap.shape != a.shape:
        raise ValueError(f"map shape {dmap.shape} != image shape {a.shape}")
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    sgn = 1.0 if direction == "forward" else -1.0
    h, w = a.shape
    xs = np.arange(w)[None, :] + sgn * dmap.dx
    ys = np.arange(h)[:, None] + sgn * dmap.dy
    oob = (xs < 0) | (xs > w - 1) | (ys < 0) | (ys > h - 1)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(int)
    y0 = np.floor(yc).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    out = (a[y0, x0] * (1 - fy) * (1 - fx) + a[y0, x1] * (1 - fy) * fx
           + a[y1, x0] * fy * (1 - fx) + a[y1, x1] * fy * fx)
    out[oob] = float(a.mean()) if fill is None else float(fill)
    return np.clip(out, 0.0, 1.0)


def save_deformation_map(dmap: DeformationMap, path: str,
                         frame_ids: tuple[str, str] = ("src", "dst")) -> None:
    """Write the field as flat float32 binary (dx then dy, row-major) with a
    JSON sidecar (`<path>.json`) describing shape and frames."""
    h, w = dmap.shape
    raw = np.concatenate([
        dmap.dx.astype(np.float32).ravel(),
        dmap.dy.astype(np.float32).ravel(),
    ])
    tmp = f"{path}.tmp"
    raw.tofile(tmp)
    os.replace(tmp, path)
    sidecar = {"width": int(w), "height": int(h),
               "dtype": "float32", "order": "dx,dy",
               "frames": list(frame_ids)}
    with open(f"{path}.json", "w") as f:
        json.dump(sidecar, f, indent=1)


def load_deformation_map(path: str) -> DeformationMap:
    with open(f"{path}.json") as f:
        meta = json.load(f)
    h, w = int(meta["height"]), int(meta["width"])
    raw = np.fromfile(path, dtype=np.float32)
    if raw.size != 2 * h * w:
        raise ValueError(f"deformation file size {raw.size} != 2*{h}*{w}")
    dx = raw[: h * w].reshape(h, w).astype(np.float64)
    dy = raw[h * w:].reshape(h, w).astype(np.float64)
    return DeformationMap(dx=dx, dy=dy)
