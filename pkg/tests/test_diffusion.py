import numpy as np
import pytest
import torch

from duetgen.diffusion import (
    Denoiser,
    DenoiserConfig,
    add_noise,
    cfg_predict,
    cosine_schedule,
    ddim_step,
    diffusion_train_step,
    inference_timesteps,
    load_denoiser,
    refine_follower,
    save_denoiser,
)


def tiny_denoiser(feature_dim=8, **kw):
    base = dict(feature_dim=feature_dim, hidden_dim=16, num_layers=2, num_heads=2,
                num_styles=3, train_steps=100, infer_steps=10, opt_steps=5,
                crop_len=6, refine_t_index=4)
    base.update(kw)
    torch.manual_seed(0)
    return Denoiser(DenoiserConfig(**base))


# --- schedule ----------------------------------------------------------------


def test_schedule_endpoints_and_monotonicity():
    sch = cosine_schedule(1000, s=0.008)
    assert sch.alpha_bar[0] == 1.0
    assert sch.alpha_bar[-1] <= 1e-3
    assert np.all(np.diff(sch.alpha_bar) < 0)


def test_schedule_midpoint_matches_formula():
    n, s = 1000, 0.008
    sch = cosine_schedule(n, s)
    t = n // 2
    f = lambda u: np.cos(((u / n + s) / (1 + s)) * np.pi / 2) ** 2
    assert abs(sch.alpha_bar[t] - f(t) / f(0)) < 1e-9


def test_schedule_requires_positive_steps():
    with pytest.raises(ValueError):
        cosine_schedule(0)


# --- add_noise ----------------------------------------------------------------


def test_add_noise_identity_at_zero():
    sch = cosine_schedule(100)
    x = np.random.default_rng(0).standard_normal((5, 4))
    eps = np.random.default_rng(1).standard_normal((5, 4))
    assert np.array_equal(add_noise(x, 0, eps, sch), x)


def test_add_noise_terminal_is_mostly_noise():
    sch = cosine_schedule(1000)
    x = np.full((3, 3), 7.0)
    eps = np.random.default_rng(2).standard_normal((3, 3))
    out = add_noise(x, 1000, eps, sch)
    assert np.abs(out - eps).max() <= np.sqrt(sch.alpha_bar[1000]) * np.abs(x).max() + 1e-12


def test_add_noise_monte_carlo_variance():
    rng = np.random.default_rng(3)
    sch = cosine_schedule(1000)
    t = 400
    x = rng.standard_normal(10_000) * 2.0
    eps = rng.standard_normal(10_000)
    noisy = add_noise(x, t, eps, sch)
    expected = sch.alpha_bar[t] * x.var() + (1 - sch.alpha_bar[t])
    assert abs(noisy.var() - expected) / expected < 0.03


# --- DDIM ---------------------------------------------------------------------


def test_ddim_deterministic_at_eta_zero():
    sch = cosine_schedule(100)
    rng = np.random.default_rng(4)
    x_t = rng.standard_normal((7, 5))
    x0 = rng.standard_normal((7, 5))
    a = ddim_step(x_t, x0, 40, 20, sch, eta=0.0)
    b = ddim_step(x_t, x0, 40, 20, sch, eta=0.0)
    assert np.array_equal(a, b)


def test_ddim_collapses_to_x0_at_zero():
    sch = cosine_schedule(100)
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((4, 3))
    x_t = add_noise(x0, 10, rng.standard_normal((4, 3)), sch)
    out = ddim_step(x_t, x0, 10, 0, sch, eta=0.0)
    assert np.abs(out - x0).max() < 1e-12


def test_ddim_rejects_bad_step_pair():
    sch = cosine_schedule(100)
    x = np.zeros((2, 2))
    with pytest.raises(ValueError):
        ddim_step(x, x, 10, 10, sch)
    with pytest.raises(ValueError):
        ddim_step(x, x, 5, 10, sch)


def test_inference_ladder_uniform_stride():
    steps = inference_timesteps(1000, 50)
    assert len(steps) == 51
    assert steps[0] == 0 and steps[-1] == 1000
    assert set(np.diff(steps).tolist()) == {20}
    with pytest.raises(ValueError):
        inference_timesteps(50, 100)


# --- training objective --------------------------------------------------------


def test_train_step_lambda_constant_recorded():
    cfg = DenoiserConfig(feature_dim=4)
    assert cfg.lambda_weight == "constant"
    assert cfg.guidance_scale == 3.5
    assert cfg.cond_dropout == 0.1
    assert cfg.train_steps == 1000 and cfg.infer_steps == 50 and cfg.eta == 0.0
    assert cfg.refine_t_index == 10


def test_identity_denoiser_zero_loss_at_clean_input():
    import types

    model = tiny_denoiser()

    def identity(self, x, t, style):
        return x

    model.forward = types.MethodType(identity, model)
    sch = cosine_schedule(100)
    # at t=0 the noisy input equals the clean input, so an identity denoiser
    # reconstructs exactly
    x = torch.from_numpy(np.random.default_rng(6).standard_normal((2, 6, 8))).float()
    noisy = x  # t = 0
    loss = torch.mean((x - model(noisy, torch.zeros(2), torch.zeros(2, dtype=torch.int64))) ** 2)
    assert loss.item() == 0.0


def test_train_loss_decreases_on_small_set():
    # fixed-noise validation loss removes the variance of the random-t draws
    torch.manual_seed(1)
    rng = np.random.default_rng(7)
    model = tiny_denoiser()
    sch = cosine_schedule(100)
    data = torch.from_numpy(rng.standard_normal((4, 6, 8))).float()
    styles = torch.zeros(4, dtype=torch.int64)
    opt = torch.optim.AdamW(model.parameters(), lr=2e-3)

    val_t = np.array([10, 40, 70, 95])
    val_eps = torch.from_numpy(np.random.default_rng(8).standard_normal(data.shape)).float()
    ab = torch.from_numpy(sch.alpha_bar[val_t]).float()[:, None, None]
    val_noisy = torch.sqrt(ab) * data + torch.sqrt(1 - ab) * val_eps

    def val_loss():
        model.eval()
        with torch.no_grad():
            pred = model(val_noisy, torch.from_numpy(val_t), styles)
            return float(torch.mean((data - pred) ** 2).item())

    curve = [val_loss()]
    for _ in range(10):
        for _ in range(50):
            diffusion_train_step(model, data, styles, sch, opt, rng)
        curve.append(val_loss())
    assert curve[-1] < curve[0]
    running = np.minimum.accumulate(curve)
    assert np.all(np.array(curve) <= np.maximum(running * 1.05, running + 1e-6))


# --- classifier-free guidance ---------------------------------------------------


def test_cfg_identities_at_scales_zero_and_one():
    model = tiny_denoiser()
    model.eval()
    x = torch.randn(2, 6, 8)
    t = torch.tensor([10, 20])
    style = torch.tensor([1, 2])
    with torch.no_grad():
        cond = model(x, t, style)
        uncond = model(x, t, torch.full_like(style, model.null_style))
    assert torch.equal(cfg_predict(model, x, t, style, 1.0), cond)
    assert torch.equal(cfg_predict(model, x, t, style, 0.0), uncond)
    mid = cfg_predict(model, x, t, style, 3.5)
    assert torch.allclose(mid, uncond + 3.5 * (cond - uncond))


# --- refinement -----------------------------------------------------------------


def test_refine_t_zero_returns_input_unchanged():
    model = tiny_denoiser()
    sch = cosine_schedule(model.cfg.train_steps)
    rng = np.random.default_rng(8)
    lead = rng.standard_normal((6, 4))
    foll = rng.standard_normal((6, 4))
    out = refine_follower(model, sch, lead, foll, t_r=0, rng=rng)
    assert np.array_equal(out, foll)


def test_refine_leader_bit_exact_every_step():
    model = tiny_denoiser()
    sch = cosine_schedule(model.cfg.train_steps)
    rng = np.random.default_rng(9)
    lead = rng.standard_normal((6, 4))
    foll = rng.standard_normal((6, 4))
    trace = []
    refined = refine_follower(model, sch, lead, foll, t_r=4, style=1, rng=rng, trace=trace)
    assert len(trace) == 5  # initial state + 4 reverse steps
    for state in trace:
        assert np.array_equal(state[:, :4], lead)
    assert refined.shape == foll.shape


def test_refine_deterministic_same_rng_seed():
    model = tiny_denoiser()
    sch = cosine_schedule(model.cfg.train_steps)
    lead = np.random.default_rng(10).standard_normal((6, 4))
    foll = np.random.default_rng(11).standard_normal((6, 4))
    a = refine_follower(model, sch, lead, foll, t_r=4, rng=np.random.default_rng(42))
    b = refine_follower(model, sch, lead, foll, t_r=4, rng=np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_refine_rejects_length_mismatch():
    model = tiny_denoiser()
    sch = cosine_schedule(model.cfg.train_steps)
    with pytest.raises(ValueError):
        refine_follower(model, sch, np.zeros((6, 4)), np.zeros((5, 4)))


def test_denoiser_gradient_check():
    torch.manual_seed(2)
    model = tiny_denoiser(feature_dim=4, hidden_dim=8, num_layers=1, num_heads=2).double()
    sch = cosine_schedule(50)
    x = torch.from_numpy(np.random.default_rng(12).standard_normal((2, 4, 4)))
    t_np = np.array([7, 30])
    eps = torch.from_numpy(np.random.default_rng(13).standard_normal((2, 4, 4)))
    ab = torch.from_numpy(sch.alpha_bar[t_np])[:, None, None]
    noisy = torch.sqrt(ab) * x + torch.sqrt(1 - ab) * eps
    styles = torch.tensor([0, 1])

    def loss_fn():
        return torch.mean((x - model(noisy, torch.from_numpy(t_np), styles)) ** 2)

    model.zero_grad()
    loss_fn().backward()

    rng = np.random.default_rng(14)
    h = 1e-4
    num, den = 0.0, 0.0
    for p in model.parameters():
        if p.grad is None:
            continue
        flat = p.detach().view(-1)
        for _ in range(3):
            i = int(rng.integers(0, flat.numel()))
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                lp = loss_fn().item()
                flat[i] = orig - h
                lm = loss_fn().item()
                flat[i] = orig
            fd = (lp - lm) / (2 * h)
            auto = p.grad.view(-1)[i].item()
            num += (fd - auto) ** 2
            den += max(fd * fd, auto * auto, 1e-18)
    assert np.sqrt(num / den) < 1e-3


def test_save_load_round_trip(tmp_path):
    model = tiny_denoiser()
    sch = cosine_schedule(model.cfg.train_steps)
    mean = np.zeros(8)
    std = np.ones(8)
    save_denoiser(tmp_path / "d.ckpt", model, sch, mean, std, ["a", "b", "c"])
    back, sch2, mean2, std2, styles, meta = load_denoiser(tmp_path / "d.ckpt")
    assert styles == ["a", "b", "c"]
    assert np.array_equal(sch2.alpha_bar, sch.alpha_bar)
    x = torch.randn(1, 6, 8)
    with torch.no_grad():
        assert torch.allclose(model(x, torch.tensor([5]), torch.tensor([0])),
                              back(x, torch.tensor([5]), torch.tensor([0])), atol=1e-6)
