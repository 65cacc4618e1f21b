"""Build orchestration: dataset layout, training runs, restoration, reports.

The pipeline owns everything that spans modules: the on-disk layout of a
run directory, the train/test manifest, patch gathering, the two-stage
training (autoencoders, then the conditional denoiser on frozen codes),
full-plate restoration with overlap stitching, and the evaluation /
reconstruction reports. Every stage is a pure function of (config, data,
seed), so re-running a stage reproduces its artifacts byte for byte.

Run directory layout (all paths relative to cfg.workdir):

    hr/layer_00000.png        ground-truth plates (16-bit)
    truth/layer_00000_part_00.png  exact part masks (synthetic builds)
    lr/layer_00000.png        degraded acquisitions (16-bit)
    sr/layer_00000.png        restored plates (16-bit, at the lr grid)
    checkpoints/*.npz         weight containers
    curves/*.csv              training curves
    reports/*.{json,csv}      evaluation and reconstruction outputs
    manifest.json             the dataset manifest
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
import time
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import reconstruct as rec
from .config import RunConfig
from .imgcore import (
    DegradationSpec,
    PartSpec,
    SceneSpec,
    as_image,
    degrade,
    downsample_area,
    generate_layer,
    read_png,
    upscale_bicubic,
    write_png,
)
from .metric import mae, psnr, ssim, volume_metrics
from .neural import (
    ConvVae,
    DenoiserUnet,
    DiffusionTrainConfig,
    LatentScaler,
    NoiseSchedule,
    PatchDiscriminator,
    VaeTrainConfig,
    checkpoint_manifest,
    ddpm_generate,
    load_checkpoint,
    make_schedule,
    save_checkpoint,
    train_denoiser,
    train_vae,
)
from .phaseharmonic import (
    WaveletBank,
    WaveletBankSpec,
    build_bank,
    phase_harmonic_moments,
    wavelet_transform,
)
from .register import hough_circles, inscribe_boxes
from .segment import ReferenceSegmenter, Segmenter, adaptive_segment

__all__ = [
    "LayerEntry",
    "PartEntry",
    "DatasetManifest",
    "stage_seed",
    "parse_layer_index",
    "ingest",
    "build_synthetic",
    "build_degraded",
    "gather_patch_pairs",
    "run_train_ae",
    "run_train_diffusion",
    "stitch_patches",
    "run_superres",
    "EvalReport",
    "evaluate",
    "reconstruct_and_compare",
    "latency_report",
    "layer_filename",
]


# ---------------------------------------------------------------------------
# Seeds and workers
# ---------------------------------------------------------------------------

def stage_seed(seed: int, stage: str, *indices: int) -> int:
    """Derive a per-stage, per-item seed from the root seed."""
    ss = np.random.SeedSequence(
        [seed & 0xFFFFFFFF, zlib.crc32(stage.encode("utf-8")), *indices]
    )
    return int(ss.generate_state(1, np.uint32)[0])


def _pool_size() -> int:
    raw = os.environ.get("LAYERLENS_THREADS", "").strip()
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError(f"LAYERLENS_THREADS must be ≥ 1, got {raw!r}")
        return n
    return os.cpu_count() or 1


def _map_ordered(fn, items: list):
    """Apply fn over items through the worker pool, preserving order."""
    n = _pool_size()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


def _write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _write_json(path: str, obj) -> None:
    _write_atomic(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n")
                  .encode("utf-8"))


def _write_curves(path: str, history: list[dict[str, float]]) -> None:
    """Training curve CSV: step first, remaining columns sorted."""
    if not history:
        return
    keys = ["step"] + sorted(k for k in history[0] if k != "step")
    lines = [",".join(keys)]
    for row in history:
        lines.append(",".join(f"{row[k]:.8g}" for k in keys))
    _write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

def layer_filename(index: int) -> str:
    return f"layer_{index:05d}.png"


def parse_layer_index(name: str) -> int | None:
    """Layer number from a filename: the last digit run in the stem."""
    stem = os.path.splitext(os.path.basename(name))[0]
    found = re.findall(r"\d+", stem)
    return int(found[-1]) if found else None


@dataclass
class LayerEntry:
    index: int
    hr_path: str          # relative to the manifest root
    lr_path: str | None
    split: str            # "train" | "test"


@dataclass
class PartEntry:
    part_id: int
    box: tuple[int, int, int, int]   # x0, y0, x1, y1 on the hr grid
    split: str


@dataclass
class DatasetManifest:
    root: str
    policy: str
    fraction: float
    seed: int
    layers: list[LayerEntry] = field(default_factory=list)
    parts: list[PartEntry] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def validate(self) -> None:
        idx = [e.index for e in self.layers]
        if idx != sorted(idx) or len(set(idx)) != len(idx):
            raise ValueError("layer indices must be unique and sorted")
        for e in self.layers:
            if e.split not in ("train", "test"):
                raise ValueError(f"layer {e.index} has split {e.split!r}")
        for p in self.parts:
            if p.split not in ("train", "test"):
                raise ValueError(f"part {p.part_id} has split {p.split!r}")
        pids = [p.part_id for p in self.parts]
        if len(set(pids)) != len(pids):
            raise ValueError("part ids must be unique")

    @property
    def train_layers(self) -> tuple[int, ...]:
        return tuple(e.index for e in self.layers if e.split == "train")

    @property
    def test_layers(self) -> tuple[int, ...]:
        return tuple(e.index for e in self.layers if e.split == "test")

    @property
    def train_parts(self) -> tuple[int, ...]:
        return tuple(p.part_id for p in self.parts if p.split == "train")

    @property
    def test_parts(self) -> tuple[int, ...]:
        return tuple(p.part_id for p in self.parts if p.split == "test")

    def entry(self, index: int) -> LayerEntry:
        for e in self.layers:
            if e.index == index:
                return e
        raise KeyError(f"no layer {index} in the manifest")

    def hr(self, index: int) -> str:
        return os.path.join(self.root, self.entry(index).hr_path)

    def lr(self, index: int) -> str:
        p = self.entry(index).lr_path
        if p is None:
            raise ValueError(f"layer {index} has no degraded image")
        return os.path.join(self.root, p)

    def save(self, path: str) -> None:
        self.validate()
        obj = {
            "root": self.root,
            "policy": self.policy,
            "fraction": self.fraction,
            "seed": self.seed,
            "layers": [asdict(e) for e in self.layers],
            "parts": [{"part_id": p.part_id, "box": list(p.box),
                       "split": p.split} for p in self.parts],
            "skipped": self.skipped,
        }
        _write_json(path, obj)

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        m = cls(
            root=obj["root"],
            policy=obj["policy"],
            fraction=obj["fraction"],
            seed=obj["seed"],
            layers=[LayerEntry(**e) for e in obj["layers"]],
            parts=[PartEntry(part_id=p["part_id"], box=tuple(p["box"]),
                             split=p["split"]) for p in obj["parts"]],
            skipped=list(obj.get("skipped", [])),
        )
        m.validate()
        return m


def _split_ids(ids: list[int], fraction: float, seed: int) -> dict[int, str]:
    """Deterministic train/test assignment; both sides non-empty."""
    if len(ids) < 2:
        raise ValueError(f"need at least 2 elements to split, got {len(ids)}")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF]))
    order = list(rng.permutation(len(ids)))
    n_train = int(round(fraction * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    train = {ids[i] for i in order[:n_train]}
    return {i: ("train" if i in train else "test") for i in ids}


def ingest(
    root: str,
    pattern: str = "hr/*.png",
    policy: str = "by-layer",
    fraction: float = 0.8,
    seed: int = 0,
    register_cfg=None,
) -> DatasetManifest:
    """Scan a run directory into a manifest with a deterministic split.

    Layer indices come from the last digit run of each filename; files
    without one are skipped with a warning. The by-part policy detects
    circular parts on the lowest-index plate and assigns whole parts to one
    side, so no part contributes patches to both; layer splits are assigned
    under both policies (by-part training additionally restricts patches
    spatially).
    """
    import glob as globmod

    if policy not in ("by-layer", "by-part"):
        raise ValueError(f"unknown split policy {policy!r}")
    paths = sorted(globmod.glob(os.path.join(root, pattern)))
    entries: dict[int, str] = {}
    skipped: list[str] = []
    for p in paths:
        relp = os.path.relpath(p, root)
        idx = parse_layer_index(p)
        if idx is None:
            skipped.append(relp)
            warnings.warn(f"cannot parse a layer index from {relp!r}; skipped")
            continue
        if idx in entries:
            raise ValueError(
                f"duplicate layer index {idx}: {relp!r} vs {entries[idx]!r}"
            )
        entries[idx] = relp
    if len(entries) < 2:
        raise ValueError(f"need at least 2 layers under {root}/{pattern}")

    indices = sorted(entries)
    split = _split_ids(indices, fraction, stage_seed(seed, "split-layers"))
    layers = []
    for i in indices:
        lr_rel = os.path.join("lr", os.path.basename(entries[i]))
        layers.append(LayerEntry(
            index=i,
            hr_path=entries[i],
            lr_path=lr_rel if os.path.exists(os.path.join(root, lr_rel)) else None,
            split=split[i],
        ))

    parts: list[PartEntry] = []
    if policy == "by-part":
        reg = register_cfg or _DEFAULT_REGISTER
        first = read_png(os.path.join(root, entries[indices[0]]))
        circles = hough_circles(first, reg.r_min, reg.r_max,
                                vote_threshold=reg.vote_threshold)
        if len(circles) < 2:
            raise ValueError(
                f"by-part split needs ≥ 2 detected parts, found {len(circles)}"
            )
        boxes = inscribe_boxes(circles, reg.box_margin, first.shape)
        psplit = _split_ids([b.part_id for b in boxes], fraction,
                            stage_seed(seed, "split-parts"))
        parts = [PartEntry(part_id=b.part_id, box=(b.x0, b.y0, b.x1, b.y1),
                           split=psplit[b.part_id]) for b in boxes]

    m = DatasetManifest(root=root, policy=policy, fraction=fraction,
                        seed=seed, layers=layers, parts=parts,
                        skipped=skipped)
    m.validate()
    assert not set(m.train_layers) & set(m.test_layers)
    assert not set(m.train_parts) & set(m.test_parts)
    return m


class _DefaultRegister:
    r_min = 12
    r_max = 60
    vote_threshold = 0.5
    box_margin = 6


_DEFAULT_REGISTER = _DefaultRegister()


# ---------------------------------------------------------------------------
# Synthetic build + degradation
# ---------------------------------------------------------------------------

def _scene_spec(cfg: RunConfig) -> SceneSpec:
    parts = tuple(
        PartSpec(
            shape=p.shape,
            center=(p.cx, p.cy),
            radius=p.radius,
            intensity=p.intensity,
            inner_radius=p.inner_radius,
            n_sides=p.n_sides,
            rotation=p.rotation,
            roughness_amplitude=p.roughness_amplitude,
        )
        for p in cfg.synth.parts
    )
    return SceneSpec(
        size=(cfg.synth.height, cfg.synth.width),
        parts=parts,
        powder_mean=cfg.synth.powder_mean,
        powder_std=cfg.synth.powder_std,
        part_texture_std=cfg.synth.part_texture_std,
        illumination=(cfg.synth.illumination_x, cfg.synth.illumination_y),
        seed=stage_seed(cfg.seed, "synth"),
    )


def build_synthetic(cfg: RunConfig) -> list[str]:
    """Write the ground-truth plates and exact part masks for a run."""
    spec = _scene_spec(cfg)
    spec.validate()
    hr_dir = os.path.join(cfg.workdir, "hr")
    truth_dir = os.path.join(cfg.workdir, "truth")
    os.makedirs(hr_dir, exist_ok=True)
    os.makedirs(truth_dir, exist_ok=True)

    def _one(layer_index: int) -> str:
        scene = generate_layer(spec, layer_index)
        out = os.path.join(hr_dir, layer_filename(layer_index))
        write_png(out, scene.image, bits=16)
        for pid, mask in enumerate(scene.part_masks):
            write_png(
                os.path.join(
                    truth_dir, f"layer_{layer_index:05d}_part_{pid:02d}.png"
                ),
                mask.astype(np.float64),
                bits=8,
            )
        return out

    return _map_ordered(_one, list(range(cfg.synth.layers)))


def build_degraded(cfg: RunConfig, manifest: DatasetManifest) -> DatasetManifest:
    """Degrade every plate in the manifest; fills in lr paths."""
    lr_dir = os.path.join(cfg.workdir, "lr")
    os.makedirs(lr_dir, exist_ok=True)

    def _one(entry: LayerEntry) -> str:
        img = read_png(os.path.join(manifest.root, entry.hr_path))
        spec = DegradationSpec(
            n=cfg.degrade.n,
            sigma=cfg.degrade.sigma,
            epsilon=cfg.degrade.epsilon,
            seed=stage_seed(cfg.seed, "degrade", entry.index),
        )
        low = degrade(img, spec)
        rel = os.path.join("lr", os.path.basename(entry.hr_path))
        write_png(os.path.join(manifest.root, rel), low, bits=16)
        return rel

    rels = _map_ordered(_one, manifest.layers)
    for entry, rel in zip(manifest.layers, rels):
        entry.lr_path = rel
    return manifest


# ---------------------------------------------------------------------------
# Patch gathering
# ---------------------------------------------------------------------------

def _lr_boxes(parts: list[PartEntry], n: float) -> list[tuple[str, tuple[int, int, int, int]]]:
    out = []
    for p in parts:
        x0, y0, x1, y1 = p.box
        out.append((p.split, (int(math.floor(x0 / n)), int(math.floor(y0 / n)),
                              int(math.ceil(x1 / n)), int(math.ceil(y1 / n)))))
    return out


def _intersects(y: int, x: int, size: int, box: tuple[int, int, int, int]) -> bool:
    bx0, by0, bx1, by1 = box
    return x < bx1 and x + size > bx0 and y < by1 and y + size > by0


def gather_patch_pairs(
    manifest: DatasetManifest,
    cfg: RunConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Aligned (restoration target, degraded) patch stacks from train layers.

    Both stacks live on the degraded pixel grid: the target is the plate
    area-downsampled by the degradation factor with no blur or noise, the
    input is the stored degraded image. Under the by-part policy a patch
    may not touch any held-out part's box; pure-powder patches are kept
    since they carry no part geometry.
    """
    size = cfg.vae.patch
    per_layer = cfg.vae.patches_per_layer
    boxes = _lr_boxes(manifest.parts, cfg.degrade.n)
    test_boxes = [b for s, b in boxes if s == "test"]

    clean_all: list[np.ndarray] = []
    degr_all: list[np.ndarray] = []
    for index in manifest.train_layers:
        hr = read_png(manifest.hr(index))
        lr = read_png(manifest.lr(index))
        target = downsample_area(hr, cfg.degrade.n)
        if target.shape != lr.shape:
            raise ValueError(
                f"layer {index}: degraded shape {lr.shape} does not match "
                f"the downsampling factor ({target.shape})"
            )
        h, w = lr.shape
        if h < size or w < size:
            raise ValueError(f"layer {index}: plate too small for {size} patches")
        rng = np.random.default_rng(np.random.SeedSequence(
            [stage_seed(cfg.seed, "patches", index)]
        ))
        taken = 0
        attempts = 0
        while taken < per_layer and attempts < 200 * per_layer:
            attempts += 1
            y = int(rng.integers(0, h - size + 1))
            x = int(rng.integers(0, w - size + 1))
            if manifest.policy == "by-part":
                # held-out part geometry must never reach training; pure
                # powder carries none, so only test boxes are off limits
                if any(_intersects(y, x, size, b) for b in test_boxes):
                    continue
            clean_all.append(target[y:y + size, x:x + size])
            degr_all.append(lr[y:y + size, x:x + size])
            taken += 1
        if taken < per_layer:
            warnings.warn(
                f"layer {index}: only {taken}/{per_layer} patches placed"
            )
    if not clean_all:
        raise ValueError("no training patches gathered")
    return (np.stack(clean_all).astype(np.float32),
            np.stack(degr_all).astype(np.float32))


# ---------------------------------------------------------------------------
# Training stages
# ---------------------------------------------------------------------------

def _ckpt(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.workdir, "checkpoints", f"{name}.npz")


def _curves(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.workdir, "curves", f"{name}.csv")


def run_train_ae(manifest: DatasetManifest, cfg: RunConfig) -> dict[str, str]:
    """Train the two patch autoencoders and persist their checkpoints.

    The detail route learns to reconstruct blur- and noise-free plates at
    the degraded grid; the acquisition route learns the degraded images
    themselves. Both share the patch origins, so their codes stay aligned
    for the conditional stage.
    """
    clean, degr = gather_patch_pairs(manifest, cfg)
    out = {}
    for name, stack in (("vae_hr", clean), ("vae_lr", degr)):
        torch.manual_seed(stage_seed(cfg.seed, f"{name}-init"))
        model = ConvVae(base=cfg.vae.base,
                        latent_channels=cfg.vae.latent_channels)
        disc = None
        if cfg.vae.use_discriminator:
            disc = PatchDiscriminator(base=cfg.vae.base)
        tcfg = VaeTrainConfig(
            steps=cfg.vae.steps,
            batch=cfg.vae.batch,
            lr=cfg.vae.lr,
            kl_weight=cfg.vae.kl_weight,
            grad_weight=cfg.vae.grad_weight,
            disc_weight=cfg.vae.disc_weight,
            seed=stage_seed(cfg.seed, f"{name}-train"),
        )
        history = train_vae(model, stack, tcfg, disc=disc)
        path = _ckpt(cfg, name)
        save_checkpoint(path, model, extra={"route": name,
                                            "train": asdict(tcfg)})
        _write_curves(_curves(cfg, name), history)
        out[name] = path
    return out


def _load_vae(path: str) -> ConvVae:
    man = checkpoint_manifest(path)
    model = ConvVae(**man["config"])
    load_checkpoint(path, model)
    return model


def _encode_mu(model: ConvVae, patches: np.ndarray, batch: int = 64) -> np.ndarray:
    xs = torch.from_numpy(patches[:, None, :, :].astype(np.float32))
    mus = []
    with torch.no_grad():
        for i in range(0, xs.shape[0], batch):
            mu, _ = model.encode(xs[i:i + batch])
            mus.append(mu.numpy())
    return np.concatenate(mus, axis=0)


def run_train_diffusion(manifest: DatasetManifest, cfg: RunConfig) -> str:
    """Train the conditional denoiser on frozen autoencoder codes."""
    vae_hr = _load_vae(_ckpt(cfg, "vae_hr"))
    vae_lr = _load_vae(_ckpt(cfg, "vae_lr"))
    clean, degr = gather_patch_pairs(manifest, cfg)
    mu_hr = _encode_mu(vae_hr, clean)
    mu_lr = _encode_mu(vae_lr, degr)

    scaler_hr = LatentScaler.fit(mu_hr)
    scaler_lr = LatentScaler.fit(mu_lr)
    z0 = scaler_hr.apply(mu_hr)
    zc = scaler_lr.apply(mu_lr)

    schedule = make_schedule(cfg.diffusion.t_steps, cfg.diffusion.beta_start,
                             cfg.diffusion.beta_end)
    torch.manual_seed(stage_seed(cfg.seed, "denoiser-init"))
    model = DenoiserUnet(
        in_channels=cfg.vae.latent_channels,
        cond_channels=cfg.vae.latent_channels,
        base=cfg.diffusion.base,
        channel_mults=tuple(cfg.diffusion.channel_mults),
        res_blocks=cfg.diffusion.res_blocks,
    )
    tcfg = DiffusionTrainConfig(
        steps=cfg.diffusion.steps,
        batch=cfg.diffusion.batch,
        lr=cfg.diffusion.lr,
        ema_decay=cfg.diffusion.ema_decay,
        seed=stage_seed(cfg.seed, "diffusion-train"),
    )
    history = train_denoiser(model, z0, zc, schedule, tcfg)
    path = _ckpt(cfg, "denoiser")
    save_checkpoint(path, model, extra={
        "schedule": {"t_steps": cfg.diffusion.t_steps,
                     "beta_start": cfg.diffusion.beta_start,
                     "beta_end": cfg.diffusion.beta_end},
        "scaler_hr": scaler_hr.scale.tolist(),
        "scaler_lr": scaler_lr.scale.tolist(),
        "train": asdict(tcfg),
    })
    _write_curves(_curves(cfg, "denoiser"), history)
    return path


# ---------------------------------------------------------------------------
# Stitching
# ---------------------------------------------------------------------------

def _ramp(size: int, overlap: int) -> np.ndarray:
    """1D blending weight: cosine ramps of `overlap` samples at both ends."""
    w = np.ones(size, dtype=np.float64)
    if overlap > 0:
        t = (np.arange(overlap) + 0.5) / overlap
        rise = 0.5 * (1.0 - np.cos(np.pi * t))
        w[:overlap] = rise
        w[size - overlap:] = rise[::-1]
    return np.maximum(w, 1e-6)


def stitch_patches(
    patches: np.ndarray,
    origins: list[tuple[int, int]],
    out_shape: tuple[int, int],
    stride: int,
) -> np.ndarray:
    """Assemble overlapping patches into one plate.

    With stride < patch size, contributions are averaged under a separable
    cosine-ramp window whose ramps span the nominal overlap, which removes
    visible seams. With stride ≥ patch size the patches are pasted in
    origin order, so every output pixel comes from exactly one patch.
    """
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] != len(origins):
        raise ValueError("patches must be (N, size, size) matching origins")
    size = p.shape[1]
    if p.shape[2] != size:
        raise ValueError("patches must be square")
    h, w = out_shape
    if stride >= size:
        out = np.zeros(out_shape, dtype=np.float64)
        seen = np.zeros(out_shape, dtype=bool)
        for (y, x), patch in zip(origins, p):
            out[y:y + size, x:x + size] = patch
            seen[y:y + size, x:x + size] = True
        if not seen.all():
            raise ValueError("patch grid does not cover the output")
        return out
    overlap = size - stride
    win = _ramp(size, overlap)
    win2 = np.outer(win, win)
    acc = np.zeros(out_shape, dtype=np.float64)
    den = np.zeros(out_shape, dtype=np.float64)
    for (y, x), patch in zip(origins, p):
        if y < 0 or x < 0 or y + size > h or x + size > w:
            raise ValueError(f"patch at ({y}, {x}) exceeds {out_shape}")
        acc[y:y + size, x:x + size] += win2 * patch
        den[y:y + size, x:x + size] += win2
    if np.any(den == 0.0):
        raise ValueError("patch grid does not cover the output")
    return acc / den


def _grid(extent: int, size: int, stride: int) -> list[int]:
    if extent < size:
        raise ValueError(f"extent {extent} smaller than patch size {size}")
    xs = list(range(0, extent - size + 1, max(stride, 1)))
    if xs[-1] != extent - size:
        xs.append(extent - size)
    return xs


# ---------------------------------------------------------------------------
# Restoration
# ---------------------------------------------------------------------------

def _load_restoration(cfg: RunConfig):
    vae_hr = _load_vae(_ckpt(cfg, "vae_hr"))
    vae_lr = _load_vae(_ckpt(cfg, "vae_lr"))
    dpath = _ckpt(cfg, "denoiser")
    man = checkpoint_manifest(dpath)
    model = DenoiserUnet(**man["config"])
    load_checkpoint(dpath, model)
    extra = man["extra"]
    schedule = make_schedule(extra["schedule"]["t_steps"],
                             extra["schedule"]["beta_start"],
                             extra["schedule"]["beta_end"])
    scaler_hr = LatentScaler(scale=np.asarray(extra["scaler_hr"], dtype=np.float64))
    scaler_lr = LatentScaler(scale=np.asarray(extra["scaler_lr"], dtype=np.float64))
    return vae_hr, vae_lr, model, schedule, scaler_hr, scaler_lr


def restore_plate(
    lr_img: np.ndarray,
    models,
    cfg: RunConfig,
    seed: int,
) -> np.ndarray:
    """Restore one degraded plate on its own pixel grid."""
    vae_hr, vae_lr, denoiser, schedule, scaler_hr, scaler_lr = models
    a = as_image(lr_img)
    size = cfg.superres.patch
    stride = cfg.superres.stride
    ys = _grid(a.shape[0], size, stride)
    xs = _grid(a.shape[1], size, stride)
    origins = [(y, x) for y in ys for x in xs]
    stack = np.stack([a[y:y + size, x:x + size] for y, x in origins])

    cond = scaler_lr.apply(_encode_mu(vae_lr, stack.astype(np.float32)))
    cond_t = torch.from_numpy(cond.astype(np.float32))
    gen = torch.Generator().manual_seed(seed)
    latent_hw = size // 4
    outs = []
    with torch.no_grad():
        for i in range(0, cond_t.shape[0], cfg.superres.sample_batch):
            chunk = cond_t[i:i + cfg.superres.sample_batch]
            z = ddpm_generate(
                denoiser,
                (chunk.shape[0], cfg.vae.latent_channels, latent_hw, latent_hw),
                schedule,
                cond=chunk,
                generator=gen,
            )
            dec = vae_hr.decode(scaler_hr.invert(z))
            outs.append(dec[:, 0].numpy())
    patches = np.concatenate(outs, axis=0)
    return np.clip(stitch_patches(patches, origins, a.shape, stride), 0.0, 1.0)


def run_superres(
    manifest: DatasetManifest,
    cfg: RunConfig,
    which: str = "test",
) -> dict[int, str]:
    """Restore the selected plates and write them under sr/."""
    if which == "test":
        indices = list(manifest.test_layers)
    elif which == "train":
        indices = list(manifest.train_layers)
    elif which == "all":
        indices = [e.index for e in manifest.layers]
    else:
        raise ValueError(f"unknown selection {which!r}")
    models = _load_restoration(cfg)
    sr_dir = os.path.join(cfg.workdir, "sr")
    os.makedirs(sr_dir, exist_ok=True)

    def _one(index: int) -> tuple[int, str]:
        low = read_png(manifest.lr(index))
        sr = restore_plate(low, models, cfg,
                           seed=stage_seed(cfg.seed, "superres", index))
        path = os.path.join(sr_dir, layer_filename(index))
        write_png(path, sr, bits=16)
        return index, path

    return dict(_map_ordered(_one, indices))


def sr_path(cfg: RunConfig, index: int) -> str:
    return os.path.join(cfg.workdir, "sr", layer_filename(index))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_METRIC_COLUMNS = ("mae", "psnr", "ssim", "cvd", "ncvd",
                   "iou", "hausdorff", "v", "ra", "rq", "rz")


@dataclass
class EvalReport:
    """Per-sample metric rows plus mean ± std aggregates by comparison."""

    rows: list[dict] = field(default_factory=list)

    def add(self, label: str, sample: str | int, **metrics: float) -> None:
        self.rows.append({"label": label, "sample": sample, **metrics})

    def aggregates(self) -> dict[str, dict[str, tuple[float, float]]]:
        out: dict[str, dict[str, tuple[float, float]]] = {}
        labels = sorted({r["label"] for r in self.rows})
        for label in labels:
            rows = [r for r in self.rows if r["label"] == label]
            cols: dict[str, tuple[float, float]] = {}
            for key in _METRIC_COLUMNS:
                vals = [r[key] for r in rows if key in r]
                if vals:
                    arr = np.asarray(vals, dtype=np.float64)
                    cols[key] = (float(arr.mean()), float(arr.std()))
            out[label] = cols
        return out

    def save_csv(self, path: str) -> None:
        cols = ["label", "sample"] + [
            k for k in _METRIC_COLUMNS if any(k in r for r in self.rows)
        ]
        lines = [",".join(cols)]
        for r in self.rows:
            cells = []
            for k in cols:
                v = r.get(k, "")
                cells.append(f"{v:.8g}" if isinstance(v, float) else str(v))
            lines.append(",".join(cells))
        _write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))

    def save_json(self, path: str) -> None:
        _write_json(path, {
            "rows": self.rows,
            "aggregates": {
                label: {k: {"mean": m, "std": s} for k, (m, s) in cols.items()}
                for label, cols in self.aggregates().items()
            },
        })


def _bank(cfg: RunConfig) -> WaveletBank:
    return build_bank(WaveletBankSpec(J=cfg.bank.scales, L=cfg.bank.angles,
                                      Q=cfg.bank.q, size=cfg.bank.grid))


def _texture_cov(img: np.ndarray, bank: WaveletBank) -> np.ndarray:
    from .imgcore import resize_to

    size = bank.spec.size
    resized = resize_to(as_image(img), size, size)
    return phase_harmonic_moments(wavelet_transform(resized, bank)).cov


def evaluate(
    manifest: DatasetManifest,
    cfg: RunConfig,
    which: str = "test",
    bank: WaveletBank | None = None,
) -> EvalReport:
    """Image metrics for the degraded-upscaled and restored routes.

    Every selected layer yields two rows against the ground-truth plate:
    the degraded image bicubically upscaled to the plate grid, and the
    restored plate upscaled the same way.
    """
    indices = list(manifest.test_layers if which == "test"
                   else manifest.train_layers if which == "train"
                   else [e.index for e in manifest.layers])
    if bank is None:
        bank = _bank(cfg)

    def _one(index: int) -> list[dict]:
        hr = read_png(manifest.hr(index))
        h, w = hr.shape
        low = read_png(manifest.lr(index))
        spath = sr_path(cfg, index)
        if not os.path.exists(spath):
            raise FileNotFoundError(
                f"no restored plate for layer {index}; run the restoration first"
            )
        sr = read_png(spath)
        cov_hr = _texture_cov(hr, bank)
        ref_norm = float(np.linalg.norm(cov_hr))
        if ref_norm == 0.0:
            raise ValueError(f"layer {index}: plate texture is degenerate")
        rows = []
        for label, img in (("HR|LR", upscale_bicubic(low, h, w)),
                           ("HR|SR", upscale_bicubic(sr, h, w))):
            cvd = float(np.linalg.norm(_texture_cov(img, bank) - cov_hr))
            rows.append({
                "label": label,
                "sample": index,
                "mae": mae(img, hr),
                "psnr": psnr(img, hr),
                "ssim": ssim(img, hr),
                "cvd": cvd,
                "ncvd": cvd / ref_norm,
            })
        return rows

    report = EvalReport()
    for rows in _map_ordered(_one, indices):
        report.rows.extend(rows)
    return report


# ---------------------------------------------------------------------------
# Reconstruction comparison
# ---------------------------------------------------------------------------

def _truth_path(cfg: RunConfig, index: int, part: int) -> str:
    return os.path.join(cfg.workdir, "truth",
                        f"layer_{index:05d}_part_{part:02d}.png")


def _truth_parts(cfg: RunConfig, indices: list[int]) -> list[int]:
    parts = []
    pid = 0
    while os.path.exists(_truth_path(cfg, indices[0], pid)):
        parts.append(pid)
        pid += 1
    return parts


def _part_boxes_from_truth(
    cfg: RunConfig, indices: list[int], parts: list[int], shape: tuple[int, int]
) -> dict[int, tuple[int, int, int, int]]:
    margin = cfg.register.box_margin
    boxes = {}
    for pid in parts:
        ys, xs = [], []
        for index in indices:
            m = read_png(_truth_path(cfg, index, pid)) > 0.5
            yy, xx = np.nonzero(m)
            if yy.size:
                ys.extend([yy.min(), yy.max()])
                xs.extend([xx.min(), xx.max()])
        if not ys:
            continue
        y0 = max(int(min(ys)) - margin, 0)
        x0 = max(int(min(xs)) - margin, 0)
        y1 = min(int(max(ys)) + margin + 1, shape[0])
        x1 = min(int(max(xs)) + margin + 1, shape[1])
        boxes[pid] = (x0, y0, x1, y1)
    return boxes


def _segment_route(
    img: np.ndarray,
    box: tuple[int, int, int, int],
    ref_area: float,
    cfg: RunConfig,
    seed: int,
    segmenter: Segmenter,
):
    x0, y0, x1, y1 = box
    crop = img[y0:y1, x0:x1]
    return adaptive_segment(
        crop, ref_area, segmenter,
        seed=seed,
        max_iter=cfg.segment.max_iter,
        band=(cfg.segment.band_lo, cfg.segment.band_hi),
        window=min(cfg.segment.window,
                   (min(crop.shape) // 2) * 2 - 1),
        min_confidence=cfg.segment.min_confidence,
        min_stability=cfg.segment.min_stability,
    )


def reconstruct_and_compare(
    manifest: DatasetManifest,
    cfg: RunConfig,
    which: str = "test",
    segmenter: Segmenter | None = None,
) -> dict:
    """Segment, stack, and compare the three plate routes per part.

    The ground-truth plates anchor the comparison: their masks are grown
    against the exact synthetic part areas when available (otherwise the
    detected circle area), and the degraded-upscaled and restored routes
    are grown against the accepted ground-truth area. Per part this yields
    three volumes, overlap metrics of each degraded route against the
    ground-truth volume, and a roughness comparison on layers all three
    routes segmented successfully. Parts whose every layer fails in some
    route are excluded and reported.
    """
    segmenter = segmenter or ReferenceSegmenter()
    indices = sorted(manifest.test_layers if which == "test"
                     else manifest.train_layers if which == "train"
                     else [e.index for e in manifest.layers])
    if not indices:
        raise ValueError("no layers selected")
    first_hr = read_png(manifest.hr(indices[0]))
    shape = first_hr.shape

    parts = _truth_parts(cfg, indices)
    have_truth = bool(parts)
    if have_truth:
        boxes = _part_boxes_from_truth(cfg, indices, parts, shape)
    else:
        circles = hough_circles(first_hr, cfg.register.r_min,
                                cfg.register.r_max,
                                vote_threshold=cfg.register.vote_threshold)
        if not circles:
            raise ValueError("no parts found on the first selected plate")
        parts = list(range(len(circles)))
        pb = inscribe_boxes(circles, cfg.register.box_margin, shape)
        boxes = {b.part_id: (b.x0, b.y0, b.x1, b.y1) for b in pb}
        areas = {i: math.pi * c.r * c.r for i, c in enumerate(circles)}

    report: dict = {"parts": [], "excluded": [],
                    "pitch_um": cfg.reconstruct.pitch_um,
                    "thickness_um": cfg.reconstruct.thickness_um,
                    "layers": indices}
    sweep_rows: list[tuple[int, str, int, float, float, float]] = []

    def _plates(index: int):
        hr = read_png(manifest.hr(index))
        lr_up = upscale_bicubic(read_png(manifest.lr(index)), *shape)
        sr_up = upscale_bicubic(read_png(sr_path(cfg, index)), *shape)
        return hr, lr_up, sr_up

    plates = dict(zip(indices, _map_ordered(_plates, indices)))

    for pid in parts:
        box = boxes.get(pid)
        if box is None:
            report["excluded"].append({"part": pid, "route": "all",
                                       "reason": "no truth pixels"})
            continue
        masks: dict[str, list[np.ndarray | None]] = {
            "hr": [], "sr": [], "lr": []}
        anomalies = {"hr": 0, "sr": 0, "lr": 0}
        for k, index in enumerate(indices):
            hr, lr_up, sr_up = plates[index]
            if have_truth:
                t = read_png(_truth_path(cfg, index, pid)) > 0.5
                ref = float(t.sum())
            else:
                ref = areas[pid]
            res_hr = _segment_route(hr, box, ref, cfg,
                                    stage_seed(cfg.seed, "seg-hr", index, pid),
                                    segmenter)
            ref2 = float(res_hr.area) if not res_hr.anomaly else ref
            res_sr = _segment_route(sr_up, box, ref2, cfg,
                                    stage_seed(cfg.seed, "seg-sr", index, pid),
                                    segmenter)
            res_lr = _segment_route(lr_up, box, ref2, cfg,
                                    stage_seed(cfg.seed, "seg-lr", index, pid),
                                    segmenter)
            for route, res in (("hr", res_hr), ("sr", res_sr), ("lr", res_lr)):
                if res.anomaly:
                    anomalies[route] += 1
                    masks[route].append(None)
                else:
                    masks[route].append(res.mask)

        dead = [r for r in ("hr", "sr", "lr")
                if anomalies[r] == len(indices)]
        if dead:
            for r in dead:
                report["excluded"].append({
                    "part": pid, "route": r,
                    "reason": "all selected layers anomalous",
                })
            continue

        vols = {r: rec.stack_masks(masks[r],
                                   pitch_um=cfg.reconstruct.pitch_um,
                                   thickness_um=cfg.reconstruct.thickness_um)
                for r in ("hr", "sr", "lr")}
        vm_sr = volume_metrics(vols["sr"].data, vols["hr"].data)
        vm_lr = volume_metrics(vols["lr"].data, vols["hr"].data)

        entry: dict = {
            "part": pid,
            "box": list(box),
            "anomalies": anomalies,
            "volume": {
                "sr": {"iou": vm_sr.iou, "hausdorff": vm_sr.hausdorff_mean,
                       "v": vm_sr.mismatch},
                "lr": {"iou": vm_lr.iou, "hausdorff": vm_lr.hausdorff_mean,
                       "v": vm_lr.mismatch},
            },
        }

        shared = [k for k in range(len(indices))
                  if all(masks[r][k] is not None for r in ("hr", "sr", "lr"))]
        if len(shared) >= 3:
            profiles: dict[str, list[np.ndarray]] = {"hr": [], "sr": [], "lr": []}
            kept_layers = []
            for k in shared:
                m_hr = masks["hr"][k]
                yy, xx = np.nonzero(m_hr)
                center = (float(xx.mean()), float(yy.mean()))
                rows = {}
                for r in ("hr", "sr", "lr"):
                    contour = rec.largest_contour(masks[r][k])
                    if contour.size == 0:
                        rows = {}
                        break
                    rows[r] = rec.polar_profile(contour, center)
                if rows:
                    for r in ("hr", "sr", "lr"):
                        profiles[r].append(rows[r])
                    kept_layers.append(indices[k])
            if kept_layers:
                rough = {}
                for r in ("hr", "sr", "lr"):
                    pr = np.stack(profiles[r])
                    hm = rec.detrend(pr, window=cfg.reconstruct.detrend_window,
                                     pitch_um=cfg.reconstruct.pitch_um,
                                     layer_indices=tuple(kept_layers))
                    rep = rec.roughness(hm)
                    rough[r] = {"ra": rep.ra, "rq": rep.rq, "rz": rep.rz}
                    for wsize, wrep in rec.window_sweep(
                            pr, list(cfg.reconstruct.sweep_windows),
                            pitch_um=cfg.reconstruct.pitch_um):
                        sweep_rows.append((pid, r, wsize,
                                           wrep.ra, wrep.rq, wrep.rz))
                entry["roughness"] = rough
                entry["roughness_layers"] = kept_layers
        report["parts"].append(entry)

    if report["parts"]:
        for route in ("sr", "lr"):
            ious = [p["volume"][route]["iou"] for p in report["parts"]]
            report[f"mean_iou_{route}"] = float(np.mean(ious))
        ra_dev = {"sr": [], "lr": []}
        for p in report["parts"]:
            if "roughness" not in p:
                continue
            for route in ("sr", "lr"):
                ra_dev[route].append(
                    abs(p["roughness"][route]["ra"] - p["roughness"]["hr"]["ra"])
                )
        for route in ("sr", "lr"):
            if ra_dev[route]:
                report[f"mean_ra_dev_{route}"] = float(np.mean(ra_dev[route]))

    if sweep_rows:
        lines = ["part,route,window,ra,rq,rz"]
        for pid, route, wsize, ra, rq, rz in sweep_rows:
            lines.append(f"{pid},{route},{wsize},{ra:.6f},{rq:.6f},{rz:.6f}")
        _write_atomic(os.path.join(cfg.workdir, "reports", "roughness_sweep.csv"),
                      ("\n".join(lines) + "\n").encode("utf-8"))
    return report


# ---------------------------------------------------------------------------
# Latency comparison
# ---------------------------------------------------------------------------

def latency_report(
    batch: int = 64,
    t_steps: int = 2,
    base: int = 16,
    pixel_size: int = 128,
    latent_channels: int = 4,
    latent_size: int = 16,
    seed: int = 0,
) -> dict:
    """Per-sample generation wall time: compressed codes vs raw pixels.

    Both routes run the same denoiser architecture and schedule length on
    the same machine; the compressed route additionally pays for decoding
    its codes to images, so the comparison covers full sample production.
    """
    if batch < 1 or t_steps < 1:
        raise ValueError("batch and t_steps must be ≥ 1")
    schedule = make_schedule(t_steps, 1e-4, 0.05)
    torch.manual_seed(seed & 0xFFFFFFFF)
    lat_model = DenoiserUnet(in_channels=latent_channels, cond_channels=0,
                             base=base, channel_mults=(1, 2, 2), res_blocks=1)
    pix_model = DenoiserUnet(in_channels=1, cond_channels=0,
                             base=base, channel_mults=(1, 2, 2), res_blocks=1)
    vae = ConvVae(base=base, latent_channels=latent_channels)
    lat_model.eval()
    pix_model.eval()
    vae.eval()

    lat_shape = (batch, latent_channels, latent_size, latent_size)
    pix_shape = (batch, 1, pixel_size, pixel_size)
    with torch.no_grad():
        # warm up both graphs so one-time allocation cost stays out
        lat_model(torch.zeros((1,) + lat_shape[1:]), torch.ones(1, dtype=torch.long))
        pix_model(torch.zeros((1,) + pix_shape[1:]), torch.ones(1, dtype=torch.long))
        vae.decode(torch.zeros((1,) + lat_shape[1:]))

        gen = torch.Generator().manual_seed(seed & 0xFFFFFFFF)
        t0 = time.perf_counter()
        z = ddpm_generate(lat_model, lat_shape, schedule, generator=gen)
        vae.decode(z)
        t_latent = (time.perf_counter() - t0) / batch

        gen = torch.Generator().manual_seed(seed & 0xFFFFFFFF)
        t0 = time.perf_counter()
        ddpm_generate(pix_model, pix_shape, schedule, generator=gen)
        t_pixel = (time.perf_counter() - t0) / batch

    return {
        "batch": batch,
        "t_steps": t_steps,
        "latent_s_per_sample": t_latent,
        "pixel_s_per_sample": t_pixel,
        "pixel_size": pixel_size,
        "latent_shape": list(lat_shape[1:]),
    }
