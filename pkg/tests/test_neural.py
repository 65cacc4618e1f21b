"""Noise schedule, VAE/denoiser networks, sampling, and checkpoints."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from layerlens.neural import (
    ConvVae,
    DenoiserUnet,
    DiffusionTrainConfig,
    LatentScaler,
    MixtureDenoiser,
    VaeTrainConfig,
    checkpoint_manifest,
    ddpm_generate,
    load_checkpoint,
    make_schedule,
    posterior_variance,
    q_sample,
    save_checkpoint,
    train_denoiser,
    train_vae,
    vae_loss,
)

# product of (1 - beta_t) for 200 linearly spaced betas in [1e-4, 0.05],
# computed independently with mpmath at 50 digits and frozen here
ALPHA_BAR_T200 = 0.006121965241


def test_schedule_terminal_alpha_bar_frozen_value():
    s = make_schedule()
    assert s.alpha_bar(s.t_steps) == pytest.approx(ALPHA_BAR_T200, abs=1e-9)


def test_schedule_basic_shape_and_monotonicity():
    s = make_schedule(t_steps=50, beta_start=1e-4, beta_end=0.03)
    assert s.t_steps == 50
    assert s.betas[0] == pytest.approx(1e-4)
    assert s.betas[-1] == pytest.approx(0.03)
    assert np.all(np.diff(s.betas) > 0)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bar(0) == 1.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(t_steps=0)
    with pytest.raises(ValueError):
        make_schedule(beta_start=0.0)
    with pytest.raises(ValueError):
        make_schedule(beta_start=0.05, beta_end=0.01)
    with pytest.raises(ValueError):
        make_schedule(beta_end=1.0)


def test_q_sample_exact_formula():
    s = make_schedule()
    z0 = torch.full((3, 2, 4, 4), 0.5, dtype=torch.float64)
    eps = torch.randn((3, 2, 4, 4), dtype=torch.float64,
                      generator=torch.Generator().manual_seed(1))
    t = torch.tensor([1, 100, 200])
    zt = q_sample(z0, t, eps, s)
    for i, step in enumerate((1, 100, 200)):
        abar = s.alpha_bar(step)
        want = math.sqrt(abar) * z0[i] + math.sqrt(1.0 - abar) * eps[i]
        assert torch.allclose(zt[i], want, atol=1e-12)


def test_q_sample_moments_match():
    s = make_schedule()
    n, step = 20000, 120
    gen = torch.Generator().manual_seed(7)
    z0 = torch.full((n, 1, 1, 1), 0.7, dtype=torch.float64)
    eps = torch.randn((n, 1, 1, 1), dtype=torch.float64, generator=gen)
    zt = q_sample(z0, torch.full((n,), step), eps, s).ravel()
    abar = s.alpha_bar(step)
    sd = math.sqrt(1.0 - abar)
    # 3-sigma bands for the mean and the variance estimators
    assert abs(float(zt.mean()) - math.sqrt(abar) * 0.7) < 3.0 * sd / math.sqrt(n)
    assert abs(float(zt.var(unbiased=True)) - sd**2) \
        < 3.0 * sd**2 * math.sqrt(2.0 / (n - 1))


def test_q_sample_rejects_bad_timesteps():
    s = make_schedule()
    z = torch.zeros((1, 1, 2, 2))
    with pytest.raises(ValueError):
        q_sample(z, torch.tensor([0]), z, s)
    with pytest.raises(ValueError):
        q_sample(z, torch.tensor([201]), z, s)


def test_posterior_variance_zero_at_first_step():
    s = make_schedule()
    assert posterior_variance(s, 1) == 0.0


def test_posterior_variance_closed_form():
    s = make_schedule()
    t = 150
    want = float(s.betas[t - 1]) * (1.0 - s.alpha_bar(t - 1)) \
        / (1.0 - s.alpha_bar(t))
    assert posterior_variance(s, t) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        posterior_variance(s, 0)
    with pytest.raises(ValueError):
        posterior_variance(s, 201)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

def test_vae_shapes_factor_four():
    torch.manual_seed(0)
    vae = ConvVae(base=8, latent_channels=4)
    x = torch.rand(2, 1, 64, 64)
    with torch.no_grad():
        mu, logvar = vae.encode(x)
        assert mu.shape == (2, 4, 16, 16)
        assert logvar.shape == (2, 4, 16, 16)
        y = vae.decode(mu)
    assert y.shape == (2, 1, 64, 64)
    assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0


def test_vae_forward_deterministic_with_generator():
    torch.manual_seed(0)
    vae = ConvVae(base=8)
    x = torch.rand(2, 1, 32, 32, generator=torch.Generator().manual_seed(3))
    a = vae(x, generator=torch.Generator().manual_seed(5))
    b = vae(x, generator=torch.Generator().manual_seed(5))
    assert torch.equal(a[0], b[0])


def test_vae_config_roundtrip():
    vae = ConvVae(in_channels=1, base=16, latent_channels=8)
    assert vae.config() == {"in_channels": 1, "base": 16,
                            "latent_channels": 8}


def test_vae_loss_zero_for_perfect_reconstruction():
    x = torch.rand(2, 1, 8, 8)
    mu = torch.zeros(2, 4, 2, 2)
    logvar = torch.zeros(2, 4, 2, 2)
    total, parts = vae_loss(x, x.clone(), mu, logvar)
    assert float(total) == pytest.approx(0.0, abs=1e-12)
    assert parts["recon_l1"] == 0.0
    assert parts["kl"] == 0.0


def test_vae_loss_kl_closed_form():
    x = torch.zeros(1, 1, 4, 4)
    mu = torch.full((1, 4, 1, 1), 0.8)
    logvar = torch.zeros(1, 4, 1, 1)
    _, parts = vae_loss(x, x, mu, logvar, kl_weight=1.0)
    assert parts["kl"] == pytest.approx(0.5 * 0.8**2, rel=1e-6)


def test_vae_loss_optional_terms_logged():
    x = torch.rand(1, 1, 8, 8)
    y = torch.rand(1, 1, 8, 8)
    mu = torch.zeros(1, 2, 2, 2)
    lv = torch.zeros(1, 2, 2, 2)
    _, parts = vae_loss(x, y, mu, lv, grad_weight=0.1,
                        disc_logits=torch.zeros(1, 1, 2, 2))
    assert "grad_l1" in parts and "adversarial" in parts


@settings(max_examples=25, deadline=None)
@given(mu=st.floats(-3.0, 3.0), logvar=st.floats(-4.0, 4.0))
def test_vae_loss_kl_nonnegative(mu, logvar):
    x = torch.zeros(1, 1, 2, 2)
    m = torch.full((1, 1, 1, 1), mu)
    lv = torch.full((1, 1, 1, 1), logvar)
    _, parts = vae_loss(x, x, m, lv)
    assert parts["kl"] >= -1e-7


def test_denoiser_shapes_and_zero_init():
    torch.manual_seed(0)
    net = DenoiserUnet(in_channels=4, cond_channels=4, base=8,
                       channel_mults=(1, 2), res_blocks=1)
    z = torch.randn(2, 4, 16, 16)
    cond = torch.randn(2, 4, 16, 16)
    out = net(z, torch.tensor([3, 7]), cond)
    assert out.shape == (2, 4, 16, 16)
    # the zero-initialized head makes the first prediction exactly zero
    assert torch.equal(out, torch.zeros_like(out))


def test_denoiser_conditioning_contract():
    net = DenoiserUnet(in_channels=2, cond_channels=2, base=8,
                       channel_mults=(1,), res_blocks=1)
    z = torch.randn(1, 2, 8, 8)
    with pytest.raises(ValueError):
        net(z, torch.tensor([1]))
    plain = DenoiserUnet(in_channels=2, cond_channels=0, base=8,
                         channel_mults=(1,), res_blocks=1)
    with pytest.raises(ValueError):
        plain(z, torch.tensor([1]), torch.randn(1, 2, 8, 8))
    assert plain(z, torch.tensor([1])).shape == z.shape


def test_denoiser_scalar_timestep_broadcast():
    net = DenoiserUnet(in_channels=2, cond_channels=0, base=8,
                       channel_mults=(1,), res_blocks=1)
    z = torch.randn(3, 2, 8, 8)
    out = net(z, torch.tensor(5))
    assert out.shape == z.shape


def test_denoiser_validation_and_config():
    with pytest.raises(ValueError):
        DenoiserUnet(channel_mults=())
    net = DenoiserUnet(in_channels=4, cond_channels=4, base=8,
                       channel_mults=(1, 2), res_blocks=1)
    assert net.config() == {
        "in_channels": 4, "cond_channels": 4, "base": 8,
        "channel_mults": [1, 2], "res_blocks": 1,
    }


def test_mixture_denoiser_degenerate_mode_closed_form():
    s = make_schedule()
    mode = torch.full((1, 2, 2), 0.6, dtype=torch.float64)
    den = MixtureDenoiser(mode, mode.clone(), s)
    z = torch.randn((3, 1, 2, 2), dtype=torch.float64,
                    generator=torch.Generator().manual_seed(2))
    t = 50
    abar = s.alpha_bar(t)
    eps_hat = den(z, torch.tensor(t))
    want = (z - math.sqrt(abar) * mode) / math.sqrt(1.0 - abar)
    assert torch.allclose(eps_hat, want, atol=1e-10)


def test_mixture_denoiser_snaps_to_nearest_mode():
    s = make_schedule()
    a = torch.full((1, 1, 1), -1.0, dtype=torch.float64)
    b = torch.full((1, 1, 1), 1.0, dtype=torch.float64)
    den = MixtureDenoiser(a, b, s)
    t = 5  # late in the reverse pass: abar close to 1, assignments sharp
    abar = s.alpha_bar(t)
    z = math.sqrt(abar) * torch.stack([a, b])  # exactly on each center
    eps_hat = den(z, torch.tensor(t))
    assert torch.allclose(eps_hat, torch.zeros_like(eps_hat), atol=1e-8)


def test_mixture_denoiser_shape_mismatch():
    s = make_schedule()
    with pytest.raises(ValueError):
        MixtureDenoiser(torch.zeros(2, 2), torch.zeros(3, 3), s)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def test_ddpm_generate_bit_identical_for_seed():
    s = make_schedule(t_steps=20)
    net = DenoiserUnet(in_channels=2, cond_channels=0, base=8,
                       channel_mults=(1,), res_blocks=1)
    a = ddpm_generate(net, (2, 2, 8, 8), s,
                      generator=torch.Generator().manual_seed(9))
    b = ddpm_generate(net, (2, 2, 8, 8), s,
                      generator=torch.Generator().manual_seed(9))
    assert torch.equal(a, b)
    c = ddpm_generate(net, (2, 2, 8, 8), s,
                      generator=torch.Generator().manual_seed(10))
    assert not torch.equal(a, c)


def test_ddpm_generate_zero_denoiser_variance_ladder():
    # with eps_hat = 0 the reverse recursion has a closed-form variance:
    # var_{t-1} = var_t / alpha_t + posterior_variance(t), var_T = 1
    s = make_schedule()
    var = 1.0
    for t in range(s.t_steps, 0, -1):
        var = var / float(s.alphas[t - 1]) + posterior_variance(s, t)
    n = 4096
    z = ddpm_generate(lambda z_t, t: torch.zeros_like(z_t), (n, 1, 1, 1), s,
                      generator=torch.Generator().manual_seed(0),
                      dtype=torch.float64)
    sample_var = float(z.ravel().var(unbiased=True))
    assert abs(sample_var - var) < 3.0 * var * math.sqrt(2.0 / (n - 1))
    assert abs(float(z.mean())) < 3.0 * math.sqrt(var / n)


def test_ddpm_generate_mixture_recovers_both_modes():
    s = make_schedule()
    a = torch.full((1, 1, 1), -1.0, dtype=torch.float64)
    b = torch.full((1, 1, 1), 1.0, dtype=torch.float64)
    den = MixtureDenoiser(a, b, s)
    n = 64
    z = ddpm_generate(den, (n, 1, 1, 1), s,
                      generator=torch.Generator().manual_seed(3),
                      dtype=torch.float64).ravel()
    near_a = int(((z + 1.0).abs() < 0.2).sum())
    near_b = int(((z - 1.0).abs() < 0.2).sum())
    assert near_a + near_b == n  # every sample lands on a mode
    assert near_a >= int(0.2 * n) and near_b >= int(0.2 * n)


# ---------------------------------------------------------------------------
# Latent scaler
# ---------------------------------------------------------------------------

def test_scaler_unit_variance_data(rng):
    z = rng.normal(0.0, 1.0, (256, 2, 4, 4))
    sc = LatentScaler.fit(z)
    assert np.allclose(sc.scale, 1.0, atol=0.35)


def test_scaler_whitens_and_inverts(rng):
    z = rng.normal(0.0, 10.0, (512, 2, 4, 4))
    sc = LatentScaler.fit(z)
    assert np.allclose(sc.scale, 0.1, atol=0.02)
    white = sc.apply(z)
    assert np.allclose(white.std(axis=0), 1.0, atol=1e-9)
    assert np.allclose(sc.invert(white), z, atol=1e-9)
    re_fit = LatentScaler.fit(white)
    assert np.allclose(re_fit.scale, 1.0, atol=1e-9)


def test_scaler_torch_tensors(rng):
    z = rng.normal(0.0, 2.0, (64, 1, 2, 2))
    sc = LatentScaler.fit(z)
    t = torch.from_numpy(z).float()
    out = sc.apply(t)
    assert isinstance(out, torch.Tensor)
    back = sc.invert(out)
    assert torch.allclose(back, t, atol=1e-5)


def test_scaler_zero_variance_warns(rng):
    z = rng.normal(0.0, 1.0, (64, 1, 2, 2))
    z[:, 0, 0, 0] = 3.14
    with pytest.warns(RuntimeWarning):
        sc = LatentScaler.fit(z)
    assert sc.scale[0, 0, 0] == 1.0


def test_scaler_validation(rng):
    with pytest.raises(ValueError):
        LatentScaler.fit(rng.normal(0, 1, (8, 1, 2, 2)))  # below MIN_BATCH
    with pytest.raises(ValueError):
        LatentScaler.fit(rng.normal(0, 1, (64, 2, 2)))


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def test_train_vae_runs_and_logs(rng):
    torch.manual_seed(0)
    vae = ConvVae(base=8)
    patches = rng.random((32, 16, 16)).astype(np.float32)
    hist = train_vae(vae, patches, VaeTrainConfig(steps=30, batch=8,
                                                  lr=1e-3, log_every=10))
    assert [h["step"] for h in hist] == [10.0, 20.0, 30.0]
    for h in hist:
        assert set(h) == {"step", "recon_l1", "kl", "total"}
        assert np.isfinite(h["total"])
    assert hist[-1]["recon_l1"] < hist[0]["recon_l1"]


def test_train_vae_deterministic(rng):
    patches = rng.random((16, 16, 16)).astype(np.float32)
    outs = []
    for _ in range(2):
        torch.manual_seed(4)
        vae = ConvVae(base=8)
        train_vae(vae, patches, VaeTrainConfig(steps=10, batch=4, lr=1e-3,
                                               seed=2, log_every=5))
        x = torch.from_numpy(patches[:2][:, None])
        outs.append(vae.decode(vae.encode(x)[0]))
    assert torch.equal(outs[0], outs[1])


def test_train_vae_empty_patches_rejected():
    with pytest.raises(ValueError):
        train_vae(ConvVae(base=8), np.zeros((0, 8, 8)), VaeTrainConfig(steps=1))


def test_train_denoiser_unconditional_and_ema(rng):
    torch.manual_seed(1)
    net = DenoiserUnet(in_channels=2, cond_channels=0, base=8,
                       channel_mults=(1,), res_blocks=1)
    latents = rng.normal(0, 1, (32, 2, 8, 8)).astype(np.float32)
    s = make_schedule(t_steps=20)
    hist = train_denoiser(net, latents, None, s,
                          DiffusionTrainConfig(steps=20, batch=8, lr=1e-3,
                                               ema_decay=0.995, log_every=10))
    assert [h["step"] for h in hist] == [10.0, 20.0]
    assert all(np.isfinite(h["mse"]) for h in hist)


def test_train_denoiser_cond_count_mismatch(rng):
    net = DenoiserUnet(in_channels=2, cond_channels=2, base=8,
                       channel_mults=(1,), res_blocks=1)
    s = make_schedule(t_steps=10)
    with pytest.raises(ValueError):
        train_denoiser(net, rng.normal(0, 1, (8, 2, 8, 8)),
                       rng.normal(0, 1, (7, 2, 8, 8)), s,
                       DiffusionTrainConfig(steps=1))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_same_outputs(tmp_path):
    torch.manual_seed(0)
    vae = ConvVae(base=8)
    path = str(tmp_path / "vae.npz")
    save_checkpoint(path, vae, extra={"route": "hr"})
    torch.manual_seed(99)
    fresh = ConvVae(base=8)
    manifest = load_checkpoint(path, fresh)
    assert manifest["class"] == "ConvVae"
    assert manifest["config"] == vae.config()
    assert manifest["extra"] == {"route": "hr"}
    x = torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(1))
    assert torch.equal(vae.encode(x)[0], fresh.encode(x)[0])


def test_checkpoint_bytes_are_reproducible(tmp_path):
    torch.manual_seed(0)
    vae = ConvVae(base=8)
    p1 = str(tmp_path / "a.npz")
    p2 = str(tmp_path / "b.npz")
    save_checkpoint(p1, vae, extra={"k": 1})
    save_checkpoint(p2, vae, extra={"k": 1})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_class_mismatch_rejected(tmp_path):
    torch.manual_seed(0)
    vae = ConvVae(base=8)
    path = str(tmp_path / "vae.npz")
    save_checkpoint(path, vae)
    net = DenoiserUnet(in_channels=2, cond_channels=0, base=8,
                       channel_mults=(1,), res_blocks=1)
    with pytest.raises(ValueError):
        load_checkpoint(path, net)


def test_checkpoint_manifest_reader(tmp_path):
    torch.manual_seed(0)
    net = DenoiserUnet(in_channels=4, cond_channels=4, base=8,
                       channel_mults=(1, 2), res_blocks=1)
    path = str(tmp_path / "net.npz")
    save_checkpoint(path, net, extra={"schedule": {"t_steps": 200}})
    m = checkpoint_manifest(path)
    assert m["class"] == "DenoiserUnet"
    assert m["config"]["channel_mults"] == [1, 2]
    assert m["extra"]["schedule"]["t_steps"] == 200
