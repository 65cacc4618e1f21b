"""Prompted part segmentation with an area-driven adaptive loop.

A segmenter (the built-in region grower or an external process speaking
line-delimited JSON) proposes candidate masks from point prompts. Candidates
carry confidence and stability scores; weak ones are dropped, near-duplicates
are absorbed, and the survivors are composited by union. The adaptive loop
compares the composite area against a reference area and either accepts,
adds foreground prompts (undersegmentation), or plants a background prompt
in the spill region (oversegmentation), flagging an anomaly when the budget
runs out.
"""

from __future__ import annotations

import json
import os
import subprocess
import tempfile
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .imgcore import as_image, read_png, write_png

__all__ = [
    "sauvola_threshold",
    "foreground_mask",
    "label_components",
    "largest_component",
    "sample_prompts",
    "SegmentCandidate",
    "Segmenter",
    "ReferenceSegmenter",
    "SubprocessSegmenter",
    "filter_and_composite",
    "AdaptiveResult",
    "adaptive_segment",
]

_EIGHT = np.ones((3, 3), dtype=bool)

Point = tuple[float, float]  # (x, y) pixel coordinates


def sauvola_threshold(
    img: np.ndarray,
    window: int = 31,
    k: float = 0.2,
    r: float = 0.5,
) -> np.ndarray:
    """Local threshold map T = m · (1 + k · (s/r − 1)).

    m and s are the mean and standard deviation over a square window;
    r is the dynamic range of the deviation. Foreground is brighter than
    the local threshold (see foreground_mask).
    """
    a = as_image(img)
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and ≥ 3, got {window}")
    if r <= 0.0:
        raise ValueError(f"r must be positive, got {r}")
    m = ndimage.uniform_filter(a, size=window, mode="reflect")
    m2 = ndimage.uniform_filter(a * a, size=window, mode="reflect")
    s = np.sqrt(np.maximum(m2 - m * m, 0.0))
    return m * (1.0 + k * (s / r - 1.0))


def foreground_mask(
    img: np.ndarray,
    window: int = 31,
    k: float = 0.2,
    r: float = 0.5,
) -> np.ndarray:
    """Pixels brighter than the local Sauvola threshold."""
    a = as_image(img)
    return a > sauvola_threshold(a, window=window, k=k, r=r)


def label_components(mask: np.ndarray, close: bool = True) -> tuple[np.ndarray, int]:
    """8-connected labeling, optionally after a closing that seals pores.

    Returns (labels, count); the closing is padded so border components
    are not clipped by the structuring element.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    if close:
        p = np.pad(m, 2)
        p = ndimage.binary_closing(p, structure=_EIGHT)
        m = p[2:-2, 2:-2]
    labels, count = ndimage.label(m, structure=_EIGHT)
    return labels, int(count)


def largest_component(mask: np.ndarray, close: bool = True) -> np.ndarray:
    """Largest 8-connected component, or an all-false mask when empty."""
    labels, count = label_components(mask, close=close)
    if count == 0:
        return np.zeros(labels.shape, dtype=bool)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == int(np.argmax(counts))


def sample_prompts(
    mask: np.ndarray,
    extra: int = 0,
    rng: np.random.Generator | None = None,
) -> list[Point]:
    """Prompt points inside a mask: the most interior point, then extras.

    The first point maximizes the Euclidean distance to the mask boundary;
    extra points are drawn uniformly from the mask without replacement.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    if not m.any():
        raise ValueError("cannot sample prompts from an empty mask")
    if extra < 0:
        raise ValueError(f"extra must be ≥ 0, got {extra}")
    d = ndimage.distance_transform_edt(m)
    iy, ix = np.unravel_index(int(np.argmax(d)), d.shape)
    pts: list[Point] = [(float(ix), float(iy))]
    if extra > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        yy, xx = np.nonzero(m)
        take = rng.choice(yy.size, size=min(extra, yy.size), replace=False)
        pts.extend((float(xx[t]), float(yy[t])) for t in np.sort(take))
    return pts


@dataclass(frozen=True)
class SegmentCandidate:
    mask: np.ndarray  # bool, image shape
    confidence: float  # boundary gradient support, in [0, 1]
    stability: float  # mask IoU under a tolerance perturbation, in [0, 1]


class Segmenter(Protocol):
    """Prompted segmenter: point prompts in, scored mask candidates out."""

    def segment(
        self,
        image: np.ndarray,
        foreground: Sequence[Point],
        background: Sequence[Point] = (),
    ) -> list[SegmentCandidate]: ...


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _boundary_confidence(img: np.ndarray, mask: np.ndarray) -> float:
    """Mean gradient magnitude on the mask boundary over the image p99."""
    if not mask.any() or mask.all():
        return 0.0
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    boundary = mask & ~ndimage.binary_erosion(mask, structure=_EIGHT)
    scale = float(np.percentile(mag, 99.0))
    if scale <= 1e-12:
        return 0.0
    return float(np.clip(mag[boundary].mean() / scale, 0.0, 1.0))


def _round_points(
    points: Sequence[Point], shape: tuple[int, int], what: str
) -> list[tuple[int, int]]:
    h, w = shape
    out = []
    for x, y in points:
        xi, yi = int(round(float(x))), int(round(float(y)))
        if not (0 <= xi < w and 0 <= yi < h):
            raise ValueError(f"{what} point ({x}, {y}) outside image {w}x{h}")
        out.append((xi, yi))
    return out


@dataclass(frozen=True)
class ReferenceSegmenter:
    """Region growing around the prompt intensity at three tolerances.

    Pixels within a tolerance of the mean prompt intensity are labeled and
    the components containing foreground prompts are kept. Background
    prompts clip the similarity mask to pixels nearer a foreground prompt
    than any background prompt, so a single background point carves away a
    spill region. Stability is the IoU between the masks grown at the
    tolerance shrunk and stretched by `perturbation`.
    """

    tolerances: tuple[float, ...] = (0.08, 0.15, 0.25)
    perturbation: float = 0.10

    def segment(
        self,
        image: np.ndarray,
        foreground: Sequence[Point],
        background: Sequence[Point] = (),
    ) -> list[SegmentCandidate]:
        a = as_image(image)
        if len(foreground) == 0:
            raise ValueError("need at least one foreground point")
        fg = _round_points(foreground, a.shape, "foreground")
        bg = _round_points(background, a.shape, "background")
        ref = float(np.mean([a[y, x] for x, y in fg]))
        clip = self._clip(a.shape, fg, bg)
        out = []
        for tol in self.tolerances:
            mask = self._grow(a, fg, ref, tol, clip)
            lo = self._grow(a, fg, ref, tol * (1.0 - self.perturbation), clip)
            hi = self._grow(a, fg, ref, tol * (1.0 + self.perturbation), clip)
            out.append(
                SegmentCandidate(
                    mask=mask,
                    confidence=_boundary_confidence(a, mask),
                    stability=_iou(lo, hi),
                )
            )
        return out

    @staticmethod
    def _clip(
        shape: tuple[int, int],
        fg: list[tuple[int, int]],
        bg: list[tuple[int, int]],
    ) -> np.ndarray | None:
        if not bg:
            return None
        fgm = np.zeros(shape, dtype=bool)
        for x, y in fg:
            fgm[y, x] = True
        bgm = np.zeros(shape, dtype=bool)
        for x, y in bg:
            bgm[y, x] = True
        d_fg = ndimage.distance_transform_edt(~fgm)
        d_bg = ndimage.distance_transform_edt(~bgm)
        return d_fg < d_bg

    @staticmethod
    def _grow(
        a: np.ndarray,
        fg: list[tuple[int, int]],
        ref: float,
        tol: float,
        clip: np.ndarray | None,
    ) -> np.ndarray:
        sim = np.abs(a - ref) <= tol
        if clip is not None:
            sim &= clip
        labels, count = ndimage.label(sim, structure=_EIGHT)
        if count == 0:
            return np.zeros(a.shape, dtype=bool)
        keep = sorted({int(labels[y, x]) for x, y in fg} - {0})
        if not keep:
            return np.zeros(a.shape, dtype=bool)
        return np.isin(labels, keep)


class SubprocessSegmenter:
    """Client for an external prompted segmenter process.

    The child reads one JSON request per line on stdin:

        {"image": "<png path>", "foreground": [[x, y], ...],
         "background": [[x, y], ...]}

    and answers with one JSON line per candidate, exactly three lines:

        {"mask": "<png path>", "confidence": 0.9, "stability": 0.8}

    Mask PNGs are binarized at half scale when read back. The child stays
    alive across requests; close() (or the context manager) shuts it down.
    """

    N_CANDIDATES = 3

    def __init__(self, argv: Sequence[str], workdir: str | None = None):
        if not argv:
            raise ValueError("argv must name an executable")
        self._argv = [str(p) for p in argv]
        self._dir = workdir or tempfile.mkdtemp(prefix="layerlens-seg-")
        self._proc: subprocess.Popen | None = None
        self._count = 0

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self._argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def segment(
        self,
        image: np.ndarray,
        foreground: Sequence[Point],
        background: Sequence[Point] = (),
    ) -> list[SegmentCandidate]:
        a = as_image(image)
        proc = self._ensure()
        path = os.path.join(self._dir, f"request{self._count:06d}.png")
        self._count += 1
        write_png(path, a, bits=16)
        request = {
            "image": path,
            "foreground": [[float(x), float(y)] for x, y in foreground],
            "background": [[float(x), float(y)] for x, y in background],
        }
        assert proc.stdin is not None and proc.stdout is not None
        proc.stdin.write(json.dumps(request) + "\n")
        proc.stdin.flush()
        out = []
        for _ in range(self.N_CANDIDATES):
            line = proc.stdout.readline()
            if not line:
                raise RuntimeError(
                    f"segmenter process exited mid-reply (argv={self._argv})"
                )
            reply = json.loads(line)
            mask = read_png(reply["mask"]) > 0.5
            if mask.shape != a.shape:
                raise ValueError(
                    f"candidate mask shape {mask.shape} != image {a.shape}"
                )
            out.append(
                SegmentCandidate(
                    mask=mask,
                    confidence=float(reply["confidence"]),
                    stability=float(reply["stability"]),
                )
            )
        return out

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            if proc.stdin is not None:
                proc.stdin.close()
            proc.wait(timeout=5.0)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()

    def __enter__(self) -> "SubprocessSegmenter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def filter_and_composite(
    candidates: Sequence[SegmentCandidate],
    min_confidence: float = 0.5,
    min_stability: float = 0.5,
    dedup_iou: float = 0.9,
) -> tuple[np.ndarray, list[SegmentCandidate]]:
    """Drop weak candidates, absorb near-duplicates, composite by union.

    Candidates below either score threshold are dropped. Survivors are
    ranked by confidence + stability; a survivor overlapping an already
    kept candidate at IoU > dedup_iou is absorbed (its mask still joins the
    union, but it is not reported separately). Returns (composite mask,
    kept representatives); the composite is all-false when nothing passes.
    """
    if len(candidates) == 0:
        raise ValueError("no candidates to composite")
    shape = candidates[0].mask.shape
    passing = [
        c
        for c in candidates
        if c.confidence >= min_confidence and c.stability >= min_stability
        and c.mask.any()
    ]
    passing.sort(key=lambda c: c.confidence + c.stability, reverse=True)
    composite = np.zeros(shape, dtype=bool)
    kept: list[SegmentCandidate] = []
    for c in passing:
        if c.mask.shape != shape:
            raise ValueError("candidate masks disagree on shape")
        composite |= c.mask
        if not any(_iou(c.mask, k.mask) > dedup_iou for k in kept):
            kept.append(c)
    return composite, kept


@dataclass(frozen=True)
class AdaptiveResult:
    mask: np.ndarray
    area: int
    ref_area: float
    iterations: int
    anomaly: bool  # budget exhausted without hitting the area band


def adaptive_segment(
    image: np.ndarray,
    ref_area: float,
    segmenter: Segmenter,
    *,
    seed: int = 0,
    max_iter: int = 10,
    band: tuple[float, float] = (0.8, 1.2),
    window: int = 31,
    min_confidence: float = 0.5,
    min_stability: float = 0.5,
) -> AdaptiveResult:
    """Segment one part, steering prompts until the area looks plausible.

    Each round prompts the segmenter with the most interior point of a
    local-threshold proposal region plus any accumulated extras, filters
    and composites the candidates, and compares the area with ref_area.
    Undersegmentation adds two foreground prompts; oversegmentation resets
    the extras and plants a background prompt in the spill. A result whose
    area lies in band · ref_area is accepted; running out of iterations
    returns the last composite flagged as an anomaly.
    """
    a = as_image(image)
    if ref_area <= 0:
        raise ValueError(f"ref_area must be positive, got {ref_area}")
    lo, hi = band
    if not 0.0 < lo < hi:
        raise ValueError(f"band must satisfy 0 < lo < hi, got {band}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be ≥ 1, got {max_iter}")

    proposal = _proposal_region(a, window=window)

    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF]))
    extra = 0
    background: list[Point] = []
    last = np.zeros(a.shape, dtype=bool)
    last_area = 0
    for it in range(1, max_iter + 1):
        fg = sample_prompts(proposal, extra=extra, rng=rng)
        candidates = segmenter.segment(a, fg, tuple(background))
        composite, _ = filter_and_composite(
            candidates,
            min_confidence=min_confidence,
            min_stability=min_stability,
        )
        area = int(composite.sum())
        last, last_area = composite, area
        if lo * ref_area <= area <= hi * ref_area:
            return AdaptiveResult(
                mask=composite,
                area=area,
                ref_area=float(ref_area),
                iterations=it,
                anomaly=False,
            )
        if area < lo * ref_area:
            extra += 2
        else:
            extra = 0
            background.append(_spill_point(composite, proposal))
    return AdaptiveResult(
        mask=last,
        area=last_area,
        ref_area=float(ref_area),
        iterations=max_iter,
        anomaly=True,
    )


def _proposal_region(a: np.ndarray, window: int) -> np.ndarray:
    """Seed region for the first prompt: the brightest solid component.

    The local threshold marks about half of any flat background along with
    the bright parts, and the closing can bridge a part into that speckled
    sea, so the mask is gated by the global Otsu level first (parts sit in
    the upper mode) and the remaining components are ranked by mean
    intensity over a small area floor rather than by size.
    """
    from .register import otsu_threshold

    fgm = foreground_mask(a, window=window)
    gated = fgm & (a > otsu_threshold(a))
    if gated.any():
        fgm = gated
    labels, count = label_components(fgm)
    if count > 0:
        areas = np.bincount(labels.ravel(), minlength=count + 1)
        areas[0] = 0
        floor = max(64, a.size // 1000)
        idx = np.arange(1, count + 1)
        sums = ndimage.sum(a, labels, index=idx)
        means = sums / np.maximum(areas[1:], 1)
        big = np.nonzero(areas[1:] >= floor)[0]
        pick = int(idx[big[np.argmax(means[big])]]) if big.size else int(np.argmax(areas))
        if pick > 0:
            return labels == pick
    # featureless image: fall back to the brightest percentile, then center
    blob = largest_component(a >= np.percentile(a, 99.0), close=False)
    if blob.any():
        return blob
    blob = np.zeros(a.shape, dtype=bool)
    blob[a.shape[0] // 2, a.shape[1] // 2] = True
    return blob


def _spill_point(composite: np.ndarray, proposal: np.ndarray) -> Point:
    """Most interior point of the oversegmentation spill."""
    spill = composite & ~proposal
    if not spill.any():
        spill = composite
    d = ndimage.distance_transform_edt(spill)
    iy, ix = np.unravel_index(int(np.argmax(d)), d.shape)
    return (float(ix), float(iy))
