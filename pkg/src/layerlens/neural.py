"""Latent-diffusion super-resolution models and training loops.

Two small convolutional VAEs map 64x64 patches to 4x16x16 latents (one for
the sharp targets, one for the upscaled low-resolution conditioning); a
conditional U-Net denoiser is trained with the standard noise-prediction
objective on a linear-beta schedule and sampled ancestrally. Everything is
sized for CPU execution: group-normalized convolutions, short schedules,
and deterministic seeded generators throughout.
"""

from __future__ import annotations

import io
import json
import math
import os
import tempfile
import warnings
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "q_sample",
    "posterior_variance",
    "ConvVae",
    "PatchDiscriminator",
    "vae_loss",
    "hinge_d_loss",
    "hinge_g_loss",
    "DenoiserUnet",
    "MixtureDenoiser",
    "ddpm_generate",
    "LatentScaler",
    "VaeTrainConfig",
    "DiffusionTrainConfig",
    "train_vae",
    "train_denoiser",
    "save_checkpoint",
    "checkpoint_manifest",
    "load_checkpoint",
]


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta forward process; timesteps are 1-based (1..T)."""

    betas: np.ndarray  # (T,) float64
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def t_steps(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t, with alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def make_schedule(
    t_steps: int = 200,
    beta_start: float = 1e-4,
    beta_end: float = 0.05,
) -> NoiseSchedule:
    if t_steps < 1:
        raise ValueError(f"t_steps must be ≥ 1, got {t_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start ≤ beta_end < 1, got "
                         f"{beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, t_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas,
                         alpha_bars=np.cumprod(alphas))


def q_sample(
    z0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Forward diffusion: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    t holds 1-based integer steps, one per batch element.
    """
    if torch.any(t < 1) or torch.any(t > schedule.t_steps):
        raise ValueError("timesteps must lie in 1..T")
    abar = torch.from_numpy(schedule.alpha_bars).to(z0.dtype)[t - 1]
    shape = (-1,) + (1,) * (z0.ndim - 1)
    abar = abar.reshape(shape)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def posterior_variance(schedule: NoiseSchedule, t: int) -> float:
    """Variance of q(z_{t-1} | z_t, z0): beta_t (1-abar_{t-1}) / (1-abar_t).

    Zero at t=1 because abar(0) = 1, so the final step adds no noise.
    """
    if not 1 <= t <= schedule.t_steps:
        raise ValueError(f"t must lie in 1..{schedule.t_steps}, got {t}")
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t - 1)
    return float(schedule.betas[t - 1]) * (1.0 - abar_prev) / (1.0 - abar_t)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ConvVae(nn.Module):
    """Factor-4 convolutional VAE with a diagonal Gaussian latent.

    Two stride-2 stages map (in_channels, H, W) to (latent_channels, H/4,
    W/4); the decoder mirrors them and ends in a sigmoid so reconstructions
    stay in [0, 1].
    """

    def __init__(self, in_channels: int = 1, base: int = 32,
                 latent_channels: int = 4):
        super().__init__()
        self.in_channels = in_channels
        self.base = base
        self.latent_channels = latent_channels
        b = base
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, b, 3, padding=1),
            _norm(b), nn.SiLU(),
            nn.Conv2d(b, b, 4, stride=2, padding=1),
            _norm(b), nn.SiLU(),
            nn.Conv2d(b, 2 * b, 4, stride=2, padding=1),
            _norm(2 * b), nn.SiLU(),
            nn.Conv2d(2 * b, 2 * b, 3, padding=1),
            _norm(2 * b), nn.SiLU(),
            nn.Conv2d(2 * b, 2 * latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * b, 3, padding=1),
            _norm(2 * b), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * b, b, 3, padding=1),
            _norm(b), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(b, b, 3, padding=1),
            _norm(b), nn.SiLU(),
            nn.Conv2d(b, in_channels, 3, padding=1),
        )

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))

    def forward(
        self, x: torch.Tensor, generator: torch.Generator | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        mu, logvar = self.encode(x)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + torch.exp(0.5 * logvar) * eps
        return self.decode(z), mu, logvar

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "base": self.base,
                "latent_channels": self.latent_channels}


class PatchDiscriminator(nn.Module):
    """Small strided-conv discriminator emitting per-patch logits."""

    def __init__(self, in_channels: int = 1, base: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.base = base
        b = base
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, b, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(b, 2 * b, 4, stride=2, padding=1),
            _norm(2 * b), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * b, 2 * b, 3, padding=1),
            _norm(2 * b), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * b, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "base": self.base}


def hinge_d_loss(real_logits: torch.Tensor,
                 fake_logits: torch.Tensor) -> torch.Tensor:
    return (F.relu(1.0 - real_logits).mean()
            + F.relu(1.0 + fake_logits).mean())


def hinge_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return -fake_logits.mean()


def _grad_mag(x: torch.Tensor) -> torch.Tensor:
    # central differences with replicated edges, matching np.gradient
    xp = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = 0.5 * (xp[..., 1:-1, 2:] - xp[..., 1:-1, :-2])
    gy = 0.5 * (xp[..., 2:, 1:-1] - xp[..., :-2, 1:-1])
    gx[..., :, 0] = x[..., :, 1] - x[..., :, 0]
    gx[..., :, -1] = x[..., :, -1] - x[..., :, -2]
    gy[..., 0, :] = x[..., 1, :] - x[..., 0, :]
    gy[..., -1, :] = x[..., -1, :] - x[..., -2, :]
    return torch.sqrt(gx * gx + gy * gy + 1e-12)


def gradient_l1(x: torch.Tensor, y: torch.Tensor,
                scales: Sequence[int] = (1, 2, 4)) -> torch.Tensor:
    """Multi-scale L1 distance between gradient magnitudes."""
    total = x.new_zeros(())
    for s in scales:
        xs = F.avg_pool2d(x, s) if s > 1 else x
        ys = F.avg_pool2d(y, s) if s > 1 else y
        total = total + (_grad_mag(xs) - _grad_mag(ys)).abs().mean()
    return total / float(len(scales))


def vae_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    mu: torch.Tensor,
    logvar: torch.Tensor,
    kl_weight: float = 1e-6,
    grad_weight: float = 0.0,
    disc_logits: torch.Tensor | None = None,
    disc_weight: float = 0.5,
) -> tuple[torch.Tensor, dict[str, float]]:
    """L1 reconstruction + weighted per-element KL, plus optional terms.

    The KL term is averaged per latent element, so a unit-variance code at
    mean c costs c^2/2. disc_logits, when given, add the hinge generator
    loss scaled by disc_weight; grad_weight adds a multi-scale gradient
    magnitude L1 that sharpens edges.
    """
    rec = (x - x_hat).abs().mean()
    kl = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).mean()
    total = rec + kl_weight * kl
    parts = {"recon_l1": float(rec.detach()), "kl": float(kl.detach())}
    if grad_weight != 0.0:
        g = gradient_l1(x, x_hat)
        total = total + grad_weight * g
        parts["grad_l1"] = float(g.detach())
    if disc_logits is not None:
        adv = hinge_g_loss(disc_logits)
        total = total + disc_weight * adv
        parts["adversarial"] = float(adv.detach())
    parts["total"] = float(total.detach())
    return total, parts


class _TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("time embedding dim must be even")
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.SiLU(),
                                 nn.Linear(4 * dim, 4 * dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        dtype = self.mlp[0].weight.dtype  # follow the module precision
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=dtype)
            / max(half - 1, 1)
        )
        ang = t.to(dtype)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
        return self.mlp(emb)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = (nn.Conv2d(c_in, c_out, 1) if c_in != c_out
                     else nn.Identity())

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserUnet(nn.Module):
    """Noise-prediction U-Net; conditioning channels are concatenated.

    channel_mults control the depth (one downsample between stages), and
    each stage stacks res_blocks residual blocks with a sinusoidal timestep
    embedding added per block.
    """

    def __init__(
        self,
        in_channels: int = 4,
        cond_channels: int = 4,
        base: int = 32,
        channel_mults: tuple[int, ...] = (1, 2, 4, 4),
        res_blocks: int = 2,
    ):
        super().__init__()
        if not channel_mults:
            raise ValueError("channel_mults must be non-empty")
        self.in_channels = in_channels
        self.cond_channels = cond_channels
        self.base = base
        self.channel_mults = tuple(channel_mults)
        self.res_blocks = res_blocks

        t_dim = 4 * base
        self.time = _TimeEmbedding(base)
        self.stem = nn.Conv2d(in_channels + cond_channels, base, 3, padding=1)

        downs: list[nn.Module] = []
        ch = base
        self.skip_channels = [ch]
        for level, mult in enumerate(self.channel_mults):
            out = base * mult
            for _ in range(res_blocks):
                downs.append(_ResBlock(ch, out, t_dim))
                ch = out
                self.skip_channels.append(ch)
            if level != len(self.channel_mults) - 1:
                downs.append(nn.Conv2d(ch, ch, 4, stride=2, padding=1))
                self.skip_channels.append(ch)
        self.downs = nn.ModuleList(downs)

        self.mid1 = _ResBlock(ch, ch, t_dim)
        self.mid2 = _ResBlock(ch, ch, t_dim)

        ups: list[nn.Module] = []
        skips = list(self.skip_channels)
        for level, mult in reversed(list(enumerate(self.channel_mults))):
            out = base * mult
            for _ in range(res_blocks + 1):
                ups.append(_ResBlock(ch + skips.pop(), out, t_dim))
                ch = out
            if level != 0:
                ups.append(nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, ch, 3, padding=1),
                ))
        self.ups = nn.ModuleList(ups)

        self.out_norm = _norm(ch)
        self.out_conv = nn.Conv2d(ch, in_channels, 3, padding=1)
        # zero-init the head so the initial prediction is exactly zero,
        # which keeps early reverse steps close to a pure variance ladder
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if self.cond_channels > 0:
            if cond is None:
                raise ValueError("this denoiser requires conditioning")
            x = torch.cat([z_t, cond], dim=1)
        else:
            if cond is not None:
                raise ValueError("this denoiser takes no conditioning")
            x = z_t
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        t_emb = self.time(t)

        h = self.stem(x)
        stack = [h]
        for block in self.downs:
            h = block(h, t_emb) if isinstance(block, _ResBlock) else block(h)
            stack.append(h)
        h = self.mid2(self.mid1(h, t_emb), t_emb)
        for block in self.ups:
            if isinstance(block, _ResBlock):
                h = block(torch.cat([h, stack.pop()], dim=1), t_emb)
            else:
                h = block(h)
        return self.out_conv(F.silu(self.out_norm(h)))

    def config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "cond_channels": self.cond_channels,
            "base": self.base,
            "channel_mults": list(self.channel_mults),
            "res_blocks": self.res_blocks,
        }


class MixtureDenoiser:
    """Posterior-optimal noise predictor for a two-point latent mixture.

    For a prior that puts equal mass on two fixed tensors, the minimum-MSE
    prediction E[eps | z_t] is available in closed form, which makes this a
    stand-in for a perfectly trained network when exercising the sampler.
    """

    def __init__(self, mode_a: torch.Tensor, mode_b: torch.Tensor,
                 schedule: NoiseSchedule):
        if mode_a.shape != mode_b.shape:
            raise ValueError("modes must share a shape")
        self.modes = torch.stack([mode_a.double(), mode_b.double()])
        self.schedule = schedule

    def __call__(self, z_t: torch.Tensor, t: torch.Tensor,
                 cond: torch.Tensor | None = None) -> torch.Tensor:
        step = int(t.reshape(-1)[0]) if t.ndim else int(t)
        abar = self.schedule.alpha_bar(step)
        z = z_t.double()
        flat = z.reshape(z.shape[0], -1)
        centers = (math.sqrt(abar) * self.modes).reshape(2, -1)
        d2 = torch.cdist(flat, centers).pow(2)
        logw = -0.5 * d2 / (1.0 - abar)
        w = torch.softmax(logw, dim=1)  # (N, 2)
        z0_hat = (w @ self.modes.reshape(2, -1)).reshape(z.shape)
        eps_hat = (z - math.sqrt(abar) * z0_hat) / math.sqrt(1.0 - abar)
        return eps_hat.to(z_t.dtype)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def ddpm_generate(
    denoiser: Callable[..., torch.Tensor],
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    cond: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from z_T ~ N(0, I) down to z_0.

    The reverse step uses the posterior variance, which vanishes at t=1, so
    the last step is deterministic. Bit-identical outputs follow from the
    same generator state; cond is passed through to the denoiser untouched.
    """
    z = torch.randn(shape, generator=generator, dtype=dtype)
    with torch.no_grad():
        for step in range(schedule.t_steps, 0, -1):
            t = torch.full((shape[0],), step, dtype=torch.long)
            eps_hat = denoiser(z, t, cond) if cond is not None else \
                denoiser(z, t)
            beta = float(schedule.betas[step - 1])
            alpha = float(schedule.alphas[step - 1])
            abar = schedule.alpha_bar(step)
            mean = (z - beta / math.sqrt(1.0 - abar) * eps_hat) \
                / math.sqrt(alpha)
            var = posterior_variance(schedule, step)
            if step > 1:
                noise = torch.randn(shape, generator=generator, dtype=dtype)
                z = mean + math.sqrt(var) * noise
            else:
                z = mean
    return z


# ---------------------------------------------------------------------------
# Latent normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatentScaler:
    """Per-element latent whitening: multiply by 1/std measured on a batch."""

    scale: np.ndarray  # (C, H, W)

    MIN_BATCH = 16

    @classmethod
    def fit(cls, latents: np.ndarray) -> "LatentScaler":
        z = np.asarray(latents, dtype=np.float64)
        if z.ndim != 4:
            raise ValueError(f"latents must be (N, C, H, W), got {z.shape}")
        if z.shape[0] < cls.MIN_BATCH:
            raise ValueError(
                f"need ≥ {cls.MIN_BATCH} latents to fit a scaler, "
                f"got {z.shape[0]}"
            )
        std = z.std(axis=0)
        dead = std <= 1e-12
        if dead.any():
            warnings.warn(
                f"{int(dead.sum())} latent elements have zero variance; "
                "their scale is clamped to 1",
                RuntimeWarning,
                stacklevel=2,
            )
            std = np.where(dead, 1.0, std)
        return cls(scale=1.0 / std)

    def apply(self, latents: np.ndarray | torch.Tensor):
        if isinstance(latents, torch.Tensor):
            s = torch.from_numpy(self.scale).to(latents.dtype)
            return latents * s
        return np.asarray(latents) * self.scale

    def invert(self, latents: np.ndarray | torch.Tensor):
        if isinstance(latents, torch.Tensor):
            s = torch.from_numpy(self.scale).to(latents.dtype)
            return latents / s
        return np.asarray(latents) / self.scale


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass
class VaeTrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 4.5e-6
    kl_weight: float = 1e-6
    grad_weight: float = 0.0
    disc_weight: float = 0.5
    disc_start: int = 0  # step at which the discriminator joins; <0 disables
    seed: int = 0
    log_every: int = 200


@dataclass
class DiffusionTrainConfig:
    steps: int = 4000
    batch: int = 16
    lr: float = 5e-6
    ema_decay: float = 0.0  # 0 disables; ~0.995 smooths sampling weights
    seed: int = 0
    log_every: int = 200


def _as_batched_tensor(patches: np.ndarray) -> torch.Tensor:
    p = np.asarray(patches, dtype=np.float32)
    if p.ndim == 3:
        p = p[:, None]
    if p.ndim != 4:
        raise ValueError(f"patches must be (N, H, W) or (N, C, H, W), "
                         f"got {p.shape}")
    return torch.from_numpy(p.copy())


def train_vae(
    model: ConvVae,
    patches: np.ndarray,
    cfg: VaeTrainConfig,
    disc: PatchDiscriminator | None = None,
) -> list[dict[str, float]]:
    """Adam training of the VAE on an in-memory patch stack.

    The discriminator, when given, starts contributing at cfg.disc_start
    and is optimized alternately with the usual hinge objective.
    """
    data = _as_batched_tensor(patches)
    if data.shape[0] < 1:
        raise ValueError("no patches to train on")
    gen = torch.Generator().manual_seed(cfg.seed & 0xFFFFFFFF)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    opt_d = (torch.optim.Adam(disc.parameters(), lr=cfg.lr)
             if disc is not None else None)
    use_disc = disc is not None and cfg.disc_start >= 0
    history: list[dict[str, float]] = []
    model.train()
    for step in range(1, cfg.steps + 1):
        idx = torch.randint(0, data.shape[0], (cfg.batch,), generator=gen)
        x = data[idx]
        x_hat, mu, logvar = model(x, generator=gen)
        logits = None
        if use_disc and step >= cfg.disc_start:
            logits = disc(x_hat)
        loss, parts = vae_loss(
            x, x_hat, mu, logvar,
            kl_weight=cfg.kl_weight,
            grad_weight=cfg.grad_weight,
            disc_logits=logits,
            disc_weight=cfg.disc_weight,
        )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if logits is not None and opt_d is not None:
            d_loss = hinge_d_loss(disc(x), disc(x_hat.detach()))
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            parts["disc"] = float(d_loss)
        if step % cfg.log_every == 0 or step == cfg.steps:
            history.append({"step": float(step), **parts})
    model.eval()
    return history


def denoise_train_step(
    model: nn.Module,
    z0: torch.Tensor,
    cond: torch.Tensor | None,
    schedule: NoiseSchedule,
    opt: torch.optim.Optimizer,
    generator: torch.Generator,
) -> float:
    """One noise-prediction step: sample t and eps, minimize MSE."""
    t = torch.randint(1, schedule.t_steps + 1, (z0.shape[0],),
                      generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, schedule)
    eps_hat = model(z_t, t, cond) if cond is not None else model(z_t, t)
    loss = F.mse_loss(eps_hat, eps)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.detach())


def train_denoiser(
    model: nn.Module,
    latents: np.ndarray,
    conds: np.ndarray | None,
    schedule: NoiseSchedule,
    cfg: DiffusionTrainConfig,
) -> list[dict[str, float]]:
    """Adam training of the denoiser on precomputed (latent, cond) pairs."""
    z = _as_batched_tensor(latents)
    c = None
    if conds is not None:
        c = _as_batched_tensor(conds)
        if c.shape[0] != z.shape[0]:
            raise ValueError(
                f"latents and conds disagree: {z.shape[0]} vs {c.shape[0]}"
            )
    gen = torch.Generator().manual_seed(cfg.seed & 0xFFFFFFFF)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    shadow = None
    if cfg.ema_decay > 0.0:
        shadow = {k: v.detach().clone()
                  for k, v in model.state_dict().items()}
    history: list[dict[str, float]] = []
    window: list[float] = []
    model.train()
    for step in range(1, cfg.steps + 1):
        idx = torch.randint(0, z.shape[0], (cfg.batch,), generator=gen)
        loss = denoise_train_step(
            model, z[idx], c[idx] if c is not None else None,
            schedule, opt, gen,
        )
        if shadow is not None:
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    if v.dtype.is_floating_point:
                        shadow[k].mul_(cfg.ema_decay).add_(
                            v, alpha=1.0 - cfg.ema_decay)
                    else:
                        shadow[k].copy_(v)
        window.append(loss)
        if step % cfg.log_every == 0 or step == cfg.steps:
            history.append({"step": float(step),
                            "mse": float(np.mean(window))})
            window.clear()
    if shadow is not None:
        # sampling uses the averaged weights, which track the loss basin
        # rather than the last noisy step
        model.load_state_dict(shadow)
    model.eval()
    return history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: nn.Module,
                    extra: dict | None = None) -> None:
    """Write weights and a manifest to one npz, atomically.

    The manifest records the model class, its constructor config (via
    model.config() when available), and any JSON-serializable extras.
    """
    state = {k: v.detach().cpu().numpy()
             for k, v in model.state_dict().items()}
    manifest = {
        "class": type(model).__name__,
        "config": model.config() if hasattr(model, "config") else {},
        "extra": extra or {},
    }
    payload = dict(state)
    payload["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
    try:
        # plain np.savez stamps zip members with the wall clock; a fixed
        # date keeps checkpoint bytes identical across reruns
        with os.fdopen(fd, "wb") as fh:
            with zipfile.ZipFile(fh, "w", zipfile.ZIP_STORED) as zf:
                for name in sorted(payload):
                    buf = io.BytesIO()
                    np.lib.format.write_array(
                        buf, np.asanyarray(payload[name]), allow_pickle=False
                    )
                    info = zipfile.ZipInfo(name + ".npy",
                                           date_time=(1980, 1, 1, 0, 0, 0))
                    zf.writestr(info, buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str, model: nn.Module) -> dict:
    """Load weights saved by save_checkpoint; returns the manifest."""
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode("utf-8"))
        state = {k: torch.from_numpy(data[k])
                 for k in data.files if k != "__manifest__"}
    expected = manifest.get("class")
    if expected and expected != type(model).__name__:
        raise ValueError(
            f"checkpoint holds a {expected}, not a {type(model).__name__}"
        )
    model.load_state_dict(state)
    model.eval()
    return manifest


def checkpoint_manifest(path: str) -> dict:
    """Read only the manifest of a checkpoint, without weights."""
    with np.load(path) as data:
        return json.loads(bytes(data["__manifest__"]).decode("utf-8"))
