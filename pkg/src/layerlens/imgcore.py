"""Single-channel image primitives: I/O, degradation, resampling, patches,
and synthetic powder-bed scene generation.

Images are 2D float arrays with values in [0, 1], row-major (y, x).
Every public operation returns arrays that stay inside [0, 1] and never
emits NaN/Inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "as_image",
    "read_png",
    "write_png",
    "downsample_area",
    "gaussian_blur",
    "add_uniform_noise",
    "DegradationSpec",
    "degrade",
    "upscale_bicubic",
    "resize_to",
    "Patch",
    "extract_patches",
    "PartSpec",
    "SceneSpec",
    "LayerScene",
    "generate_layer",
]

MIN_DEGRADED_SIZE = 8  # degraded outputs smaller than this are rejected


def as_image(arr: np.ndarray) -> np.ndarray:
    """Validate and normalize an array to the internal image convention."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"image must be 2D, got shape {a.shape}")
    if a.size == 0:
        raise ValueError("image must be non-empty")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains NaN or Inf")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return a


def _clip01(a: np.ndarray) -> np.ndarray:
    return np.clip(a, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PNG I/O (8- and 16-bit grayscale)
# ---------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """Load a grayscale PNG as float64 in [0, 1].

    8-bit images divide by 255, 16-bit by 65535. Color inputs are rejected.
    """
    with PILImage.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        if im.mode in ("I;16", "I;16B"):
            return np.asarray(im, dtype=np.float64) / 65535.0
        if im.mode == "I":
            a = np.asarray(im, dtype=np.float64)
            if a.max() > 65535:
                raise ValueError(f"unsupported integer range in {path}")
            return a / 65535.0
        raise ValueError(f"unsupported PNG mode {im.mode!r} in {path}")


def write_png(path, img: np.ndarray, bits: int = 8) -> None:
    """Quantize to 8- or 16-bit grayscale PNG."""
    a = as_image(img)
    if bits == 8:
        q = np.rint(a * 255.0).astype(np.uint8)
        PILImage.fromarray(q, mode="L").save(path)
    elif bits == 16:
        q = np.rint(a * 65535.0).astype(np.uint16)
        PILImage.fromarray(q).save(path)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")


# ---------------------------------------------------------------------------
# Resampling and filtering
# ---------------------------------------------------------------------------

def _box_weights(n_in: int, factor: float) -> np.ndarray:
    """Row-resampling operator for area-weighted downsampling.

    Output cell k integrates the input over [k*factor, (k+1)*factor) ∩ [0, n_in),
    normalized by the covered length, so a constant input is preserved.
    """
    n_out = math.ceil(n_in / factor)
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for k in range(n_out):
        lo = k * factor
        hi = min((k + 1) * factor, float(n_in))
        i0, i1 = int(math.floor(lo)), int(math.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            w[k, i] = min(hi, i + 1.0) - max(lo, float(i))
        w[k] /= hi - lo
    return w


def downsample_area(img: np.ndarray, n: float) -> np.ndarray:
    """Area-weighted downsampling by a (possibly non-integer) factor n ≥ 1."""
    a = as_image(img)
    if n < 1.0:
        raise ValueError(f"downsampling factor must be ≥ 1, got {n}")
    if n == 1.0:
        return a.copy()
    wr = _box_weights(a.shape[0], float(n))
    wc = _box_weights(a.shape[1], float(n))
    return _clip01(wr @ a @ wc.T)


def _kernel_std(size: int) -> float:
    # kernel-size -> Gaussian std rule used by common imaging stacks
    return 0.3 * ((size - 1) * 0.5 - 1.0) + 0.8


def _gauss_kernel(size: int) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and ≥ 1, got {size}")
    if size == 1:
        return np.array([1.0])
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / _kernel_std(size)) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: int) -> np.ndarray:
    """Normalized Gaussian blur; sigma is the odd kernel size in pixels.

    Boundary handling is half-sample symmetric reflection, which preserves
    the image mean exactly. The 2D kernel is accumulated over symmetric
    index pairs so that blur(transpose(x)) == transpose(blur(x)) bit-exactly.
    """
    a = as_image(img)
    if sigma == 1:
        return a.copy()
    k1 = _gauss_kernel(int(sigma))
    k2 = np.outer(k1, k1)
    h, w = a.shape
    half = int(sigma) // 2
    if half >= min(h, w):
        raise ValueError(f"kernel size {sigma} too large for image {a.shape}")
    p = np.pad(a, half, mode="symmetric")
    out = np.zeros_like(a)
    for i in range(int(sigma)):
        for j in range(i, int(sigma)):
            blk = p[i:i + h, j:j + w]
            if i == j:
                out += k2[i, j] * blk
            else:
                out += k2[i, j] * (blk + p[j:j + h, i:i + w])
    return _clip01(out)


def add_uniform_noise(img: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. uniform noise from [-epsilon, epsilon] and clamp to [0, 1]."""
    a = as_image(img)
    if epsilon < 0:
        raise ValueError(f"epsilon must be ≥ 0, got {epsilon}")
    if epsilon == 0:
        return a.copy()
    return _clip01(a + rng.uniform(-epsilon, epsilon, size=a.shape))


@dataclass(frozen=True)
class DegradationSpec:
    """Parameters of the synthetic acquisition-degradation chain."""

    n: float = 5.1        # downsampling factor
    sigma: int = 11       # Gaussian kernel size, applied at the low-res scale
    epsilon: float = 0.01  # uniform noise half-width
    seed: int = 0

    def validate(self) -> None:
        if self.n < 1.0:
            raise ValueError(f"n must be ≥ 1, got {self.n}")
        if int(self.sigma) < 1:
            raise ValueError(f"sigma must be ≥ 1, got {self.sigma}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be ≥ 0, got {self.epsilon}")

    @property
    def effective_sigma(self) -> int:
        # even sizes are bumped to the next odd kernel
        s = int(self.sigma)
        return s if s % 2 == 1 else s + 1


def degrade(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Simulate a low-detail acquisition: downsample, blur, add noise.

    Order is fixed: area-weighted downsampling by n, Gaussian blur of kernel
    size sigma at the downsampled scale, then uniform noise in
    [-epsilon, epsilon], clamped to [0, 1]. Outputs smaller than
    8 px on either side are rejected.
    """
    spec.validate()
    a = as_image(img)
    out_h = math.ceil(a.shape[0] / spec.n)
    out_w = math.ceil(a.shape[1] / spec.n)
    if min(out_h, out_w) < MIN_DEGRADED_SIZE:
        raise ValueError(
            f"degraded size {out_h}x{out_w} below minimum {MIN_DEGRADED_SIZE}"
        )
    low = downsample_area(a, spec.n)
    low = gaussian_blur(low, spec.effective_sigma)
    rng = np.random.default_rng(spec.seed)
    return add_uniform_noise(low, spec.epsilon, rng)


def _keys_weights(frac: np.ndarray) -> np.ndarray:
    """4-tap Keys cubic (a = -0.5) weights for fractional offsets, normalized."""
    a = -0.5
    # offsets of the taps relative to the sample point: -1-frac, -frac, 1-frac, 2-frac
    d = np.stack([frac + 1.0, frac, 1.0 - frac, 2.0 - frac])
    ad = np.abs(d)
    w = np.where(
        ad <= 1.0,
        (a + 2.0) * ad**3 - (a + 3.0) * ad**2 + 1.0,
        a * ad**3 - 5.0 * a * ad**2 + 8.0 * a * ad - 4.0 * a,
    )
    w = np.where(ad >= 2.0, 0.0, w)
    return w / w.sum(axis=0, keepdims=True)


def _bicubic_1d(a: np.ndarray, n_out: int) -> np.ndarray:
    """Resample axis 0 from a.shape[0] to n_out ≥ a.shape[0] samples."""
    n_in = a.shape[0]
    if n_out == n_in:
        return a.copy()
    # center-aligned mapping; linear (odd-reflect) extension at the borders
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(s).astype(int)
    frac = s - i0
    w = _keys_weights(frac)  # (4, n_out)
    p = np.pad(a, [(2, 2)] + [(0, 0)] * (a.ndim - 1), mode="reflect", reflect_type="odd")
    out = np.zeros((n_out,) + a.shape[1:], dtype=np.float64)
    for t in range(4):
        idx = i0 + (t - 1) + 2
        out += w[t].reshape((-1,) + (1,) * (a.ndim - 1)) * p[idx]
    return out


def upscale_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic upscaling to (out_h, out_w); no downscale path."""
    a = as_image(img)
    if out_h < a.shape[0] or out_w < a.shape[1]:
        raise ValueError(
            f"target {out_h}x{out_w} smaller than source {a.shape}; upscale only"
        )
    if (out_h, out_w) == a.shape:
        return a.copy()
    out = _bicubic_1d(a, out_h)
    out = _bicubic_1d(out.T, out_w).T
    return _clip01(out)


def resize_to(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize to an exact shape: bicubic when growing, area-weighted when
    shrinking (per axis)."""
    a = as_image(img)
    h, w = a.shape
    if out_h >= h and out_w >= w:
        return upscale_bicubic(a, out_h, out_w)
    # shrink axes first with the exact-length box operator, then grow
    if out_h < h:
        wr = _box_weights_exact(h, out_h)
        a = wr @ a
    if out_w < w:
        wc = _box_weights_exact(w, out_w)
        a = a @ wc.T
    a = _clip01(a)
    if a.shape != (out_h, out_w):
        a = upscale_bicubic(a, out_h, out_w)
    return a


def _box_weights_exact(n_in: int, n_out: int) -> np.ndarray:
    """Box operator mapping n_in samples onto exactly n_out cells."""
    factor = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for k in range(n_out):
        lo, hi = k * factor, (k + 1) * factor
        i0, i1 = int(math.floor(lo)), int(math.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            w[k, i] = min(hi, i + 1.0) - max(lo, float(i))
        w[k] /= hi - lo
    return w


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Patch:
    y: int
    x: int
    data: np.ndarray


def extract_patches(
    img: np.ndarray,
    size: int,
    mode: str = "random",
    count: int = 115,
    stride: int | None = None,
    seed: int = 0,
) -> list[Patch]:
    """Extract square patches with their origins.

    random mode draws `count` origins uniformly over valid positions (seeded);
    grid mode tiles with `stride`, clamping the final row/column to the border
    so the union of patches covers the image whenever stride ≤ size.
    """
    a = as_image(img)
    h, w = a.shape
    if size < 1 or size > min(h, w):
        raise ValueError(f"patch size {size} invalid for image {a.shape}")
    if mode == "random":
        if count < 1:
            raise ValueError(f"count must be ≥ 1, got {count}")
        rng = np.random.default_rng(seed)
        ys = rng.integers(0, h - size + 1, count)
        xs = rng.integers(0, w - size + 1, count)
        return [Patch(int(y), int(x), a[y:y + size, x:x + size].copy())
                for y, x in zip(ys, xs)]
    if mode == "grid":
        if stride is None or stride < 1:
            raise ValueError(f"grid mode needs stride ≥ 1, got {stride}")
        ys = _grid_origins(h, size, stride)
        xs = _grid_origins(w, size, stride)
        return [Patch(y, x, a[y:y + size, x:x + size].copy())
                for y in ys for x in xs]
    raise ValueError(f"mode must be 'random' or 'grid', got {mode!r}")


def _grid_origins(extent: int, size: int, stride: int) -> list[int]:
    last = extent - size
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


# ---------------------------------------------------------------------------
# Synthetic powder-bed scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartSpec:
    """One part cross-section on the plate.

    shape: disk, ring, or polygon; center in (x, y) pixel coordinates;
    radius is the outer (circum)radius. Boundary roughness perturbs the
    radial boundary with smooth periodic noise of the given amplitude (px).
    """

    shape: str = "disk"
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 40.0
    intensity: float = 0.85
    inner_radius: float = 0.0   # rings only
    n_sides: int = 6            # polygons only
    rotation: float = 0.0       # polygons only, radians
    roughness_amplitude: float = 1.5
    roughness_orders: tuple[int, int] = (3, 14)

    def validate(self) -> None:
        if self.shape not in ("disk", "ring", "polygon"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError("intensity must be in (0, 1]")
        if self.shape == "ring" and not 0.0 < self.inner_radius < self.radius:
            raise ValueError("ring needs 0 < inner_radius < radius")
        if self.shape == "polygon" and self.n_sides < 3:
            raise ValueError("polygon needs ≥ 3 sides")
        if self.roughness_amplitude < 0:
            raise ValueError("roughness_amplitude must be ≥ 0")

    @property
    def reach(self) -> float:
        # outermost extent of the boundary, used by overlap checks
        return self.radius + 3.0 * self.roughness_amplitude


@dataclass(frozen=True)
class SceneSpec:
    """Plate-level description of a synthetic build layer series."""

    size: tuple[int, int] = (512, 512)        # (height, width)
    parts: tuple[PartSpec, ...] = ()
    powder_mean: float = 0.35
    powder_std: float = 0.08
    octaves: tuple[float, ...] = (16.0, 8.0, 4.0)  # wavelengths, px
    octave_weights: tuple[float, ...] = (1.0, 0.5, 0.25)
    part_texture_std: float = 0.02
    illumination: tuple[float, float] = (0.0, 0.0)  # ramp over (x, y), full-span delta
    seed: int = 0

    def validate(self) -> None:
        h, w = self.size
        if h < MIN_DEGRADED_SIZE or w < MIN_DEGRADED_SIZE:
            raise ValueError(f"plate size {self.size} too small")
        if not self.octaves or len(self.octaves) != len(self.octave_weights):
            raise ValueError("octaves and octave_weights must align")
        if any(not 2.0 <= lam <= max(h, w) for lam in self.octaves):
            raise ValueError("octave wavelengths must be ≥ 2 px")
        for p in self.parts:
            p.validate()
            if p.intensity <= self.powder_mean:
                raise ValueError(
                    f"part intensity {p.intensity} must exceed powder mean "
                    f"{self.powder_mean}"
                )
        for i, p in enumerate(self.parts):
            for q in self.parts[i + 1:]:
                d = math.hypot(p.center[0] - q.center[0], p.center[1] - q.center[1])
                if d < p.reach + q.reach:
                    raise ValueError(
                        f"parts at {p.center} and {q.center} overlap "
                        f"(distance {d:.1f} < {p.reach + q.reach:.1f})"
                    )


@dataclass
class LayerScene:
    image: np.ndarray
    part_masks: list[np.ndarray]  # exact boolean mask per part, scene order
    layer_index: int


def _layer_rng(seed: int, layer_index: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, layer_index, *extra]))


def _value_noise(shape: tuple[int, int], wavelength: float,
                 rng: np.random.Generator) -> np.ndarray:
    """One octave of smooth value noise with the given wavelength."""
    h, w = shape
    ny = int(math.ceil(h / wavelength)) + 2
    nx = int(math.ceil(w / wavelength)) + 2
    lattice = rng.uniform(-1.0, 1.0, size=(ny, nx))
    u = np.arange(h, dtype=np.float64)[:, None] / wavelength
    v = np.arange(w, dtype=np.float64)[None, :] / wavelength
    iu, iv = np.floor(u).astype(int), np.floor(v).astype(int)
    fu, fv = u - iu, v - iv
    su = fu * fu * (3.0 - 2.0 * fu)  # smoothstep
    sv = fv * fv * (3.0 - 2.0 * fv)
    a = lattice[iu, iv]
    b = lattice[iu, iv + 1]
    c = lattice[iu + 1, iv]
    d = lattice[iu + 1, iv + 1]
    return (a * (1 - su) * (1 - sv) + b * (1 - su) * sv
            + c * su * (1 - sv) + d * su * sv)


def _powder_field(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    total = np.zeros(spec.size, dtype=np.float64)
    for lam, wt in zip(spec.octaves, spec.octave_weights):
        total += wt * _value_noise(spec.size, lam, rng)
    total -= total.mean()
    std = total.std()
    if std > 0:
        total *= spec.powder_std / std
    return total + spec.powder_mean


def _boundary_noise(thetas: np.ndarray, orders: tuple[int, int],
                    rng: np.random.Generator) -> np.ndarray:
    """Smooth zero-mean periodic profile with unit std over [0, 2π)."""
    lo, hi = orders
    qs = np.arange(lo, hi + 1)
    amps = rng.normal(0.0, 1.0, size=qs.size)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=qs.size)
    prof = np.zeros_like(thetas)
    for q, a, ph in zip(qs, amps, phases):
        prof += a * np.cos(q * thetas + ph)
    # each cosine contributes a^2/2 to the variance
    norm = math.sqrt(0.5 * float(np.sum(amps**2)))
    return prof / norm if norm > 0 else prof


def _radial_limit(part: PartSpec, thetas: np.ndarray, noise: np.ndarray) -> np.ndarray:
    if part.shape == "polygon":
        step = 2.0 * np.pi / part.n_sides
        delta = np.mod(thetas - part.rotation, step) - step / 2.0
        base = part.radius * math.cos(np.pi / part.n_sides) / np.cos(delta)
    else:
        base = np.full_like(thetas, part.radius)
    return np.maximum(base + part.roughness_amplitude * noise, 0.0)


def _part_mask(part: PartSpec, size: tuple[int, int],
               rng: np.random.Generator) -> np.ndarray:
    h, w = size
    cx, cy = part.center
    ys = np.arange(h, dtype=np.float64)[:, None] - cy
    xs = np.arange(w, dtype=np.float64)[None, :] - cx
    dist = np.hypot(xs, ys)
    thetas = np.arctan2(ys, xs)
    outer_noise = _boundary_noise(thetas.ravel(), part.roughness_orders, rng)
    limit = _radial_limit(part, thetas.ravel(), outer_noise).reshape(h, w)
    mask = dist <= limit
    if part.shape == "ring":
        inner_noise = _boundary_noise(thetas.ravel(), part.roughness_orders, rng)
        inner = np.maximum(
            part.inner_radius + part.roughness_amplitude * inner_noise, 0.0
        ).reshape(h, w)
        mask &= dist > inner
    return mask


def generate_layer(spec: SceneSpec, layer_index: int) -> LayerScene:
    """Render one synthetic layer: powder texture, bright part cross-sections
    with rough radial boundaries, an illumination ramp, and exact masks.

    Deterministic for a given (spec.seed, layer_index).
    """
    spec.validate()
    if layer_index < 0:
        raise ValueError(f"layer_index must be ≥ 0, got {layer_index}")
    h, w = spec.size
    img = _powder_field(spec, _layer_rng(spec.seed, layer_index, 0))
    masks: list[np.ndarray] = []
    for pi, part in enumerate(spec.parts):
        prng = _layer_rng(spec.seed, layer_index, 1, pi)
        mask = _part_mask(part, spec.size, prng)
        tex = spec.part_texture_std * _value_noise(spec.size, 4.0, prng)
        img = np.where(mask, part.intensity + tex, img)
        masks.append(mask)
    gx, gy = spec.illumination
    if gx != 0.0 or gy != 0.0:
        ramp = (gx * (np.arange(w) / max(w - 1, 1) - 0.5)[None, :]
                + gy * (np.arange(h) / max(h - 1, 1) - 0.5)[:, None])
        img = img + ramp
    return LayerScene(image=_clip01(img), part_masks=masks, layer_index=layer_index)
