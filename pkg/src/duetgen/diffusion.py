"""Conditional denoising prior over the concatenated two-person trajectory.

The denoiser predicts the clean trajectory (x0 parametrization) from a
variance-preserving noisy state built with a cosine alpha-bar schedule.
Refinement noises only the follower half up to a short start step, then runs
deterministic DDIM (eta = 0) back to 0 while re-clamping the leader half to
the observed leader after every step. Conditioning is a learned style-label
embedding with a dedicated null vector for classifier-free guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import arrays_to_state_dict, save_checkpoint, state_dict_to_arrays


@dataclass
class NoiseSchedule:
    """alpha_bar table for t = 0..n_steps, strictly decreasing, ab[0] = 1."""

    n_steps: int
    alpha_bar: np.ndarray  # (n_steps + 1,)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)


def cosine_schedule(n_steps: int, s: float = 0.008) -> NoiseSchedule:
    """alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/N + s)/(1 + s)) * pi/2)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    t = np.arange(n_steps + 1, dtype=np.float64)
    f = np.cos(((t / n_steps + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    return NoiseSchedule(n_steps, f / f[0])


def add_noise(x: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Variance-preserving forward: sqrt(ab_t) x + sqrt(1 - ab_t) eps."""
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps


def inference_timesteps(n_train: int, n_infer: int) -> np.ndarray:
    """Uniform-stride subsequence 0, N/n_infer, ..., N of the training steps."""
    if n_infer > n_train:
        raise ValueError("inference steps exceed training steps")
    return np.round(np.linspace(0, n_train, n_infer + 1)).astype(np.int64)


def ddim_step(
    x_t: np.ndarray,
    x0_pred: np.ndarray,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One DDIM update t -> t_prev (t_prev < t); deterministic when eta = 0."""
    if not (0 <= t_prev < t <= schedule.n_steps):
        raise ValueError(f"bad step pair t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    eps = (x_t - np.sqrt(ab_t) * x0_pred) / np.sqrt(1.0 - ab_t)
    if eta > 0.0:
        sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
    else:
        sigma = 0.0
    dir_coef = math.sqrt(max(1.0 - ab_p - sigma**2, 0.0))
    out = np.sqrt(ab_p) * x0_pred + dir_coef * eps
    if sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise draw")
        out = out + sigma * noise
    return out


@dataclass
class DenoiserConfig:
    feature_dim: int  # 2D: leader and follower halves concatenated
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    num_styles: int = 4
    train_steps: int = 1000
    infer_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 3.5
    cond_dropout: float = 0.1
    lambda_weight: str = "constant"  # timestep weight rule; constant = 1
    lr: float = 1e-4
    batch_size: int = 16
    opt_steps: int = 800
    crop_len: int = 100
    refine_t_index: int = 10  # index into the inference-step ladder

    def validate(self) -> None:
        if self.infer_steps > self.train_steps:
            raise ValueError("inference steps must not exceed training steps")


class _TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:  # (B,) -> (B, dim)
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
        ).to(t.dtype)
        ang = t[:, None].to(freqs.dtype) * freqs[None]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
        return self.proj(emb.to(next(self.proj.parameters()).dtype))


class _EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class Denoiser(nn.Module):
    """Transformer over frames predicting the clean trajectory.

    The prediction is sqrt(alpha_bar_t) * input + correction(input, t, c):
    the analytic skip makes low-noise steps signal-preserving, so the
    network only learns the residual (the x0-prediction objective and its
    constant timestep weight are unchanged). Conditioning: sinusoidal step
    embedding plus a learned style embedding (index num_styles is the null
    vector), both added to every frame.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.feature_dim, cfg.hidden_dim)
        self.time_emb = _TimeEmbedding(cfg.hidden_dim)
        self.style_emb = nn.Embedding(cfg.num_styles + 1, cfg.hidden_dim)
        self.blocks = nn.ModuleList(
            _EncoderBlock(cfg.hidden_dim, cfg.num_heads) for _ in range(cfg.num_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.hidden_dim)
        self.out_proj = nn.Linear(cfg.hidden_dim, cfg.feature_dim)
        skip = np.sqrt(cosine_schedule(cfg.train_steps).alpha_bar)
        self.register_buffer("skip_coef", torch.from_numpy(skip).to(torch.float32))
        # frame position encoding (sinusoidal, supports any crop length)
        self._pos_cache: dict[tuple[int, torch.dtype], torch.Tensor] = {}

    @property
    def null_style(self) -> int:
        return self.cfg.num_styles

    def _positions(self, t_len: int, dtype, device) -> torch.Tensor:
        key = (t_len, dtype)
        if key not in self._pos_cache:
            d = self.cfg.hidden_dim
            pos = torch.arange(t_len, dtype=torch.float64)[:, None]
            idx = torch.arange(0, d, 2, dtype=torch.float64)[None]
            ang = pos / torch.pow(10000.0, idx / d)
            pe = torch.zeros(t_len, d, dtype=torch.float64)
            pe[:, 0::2] = torch.sin(ang)
            pe[:, 1::2] = torch.cos(ang)
            self._pos_cache[key] = pe.to(dtype)
        return self._pos_cache[key].to(device)

    def forward(self, x: torch.Tensor, t: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        """x (B, T, 2D), t (B,) int steps, style (B,) int labels -> x0 prediction."""
        h = self.in_proj(x)
        h = h + self._positions(x.shape[1], h.dtype, h.device)[None]
        cond = self.time_emb(t.to(h.dtype)) + self.style_emb(style)
        h = h + cond[:, None, :]
        for blk in self.blocks:
            h = blk(h)
        skip = self.skip_coef.to(x.dtype)[t][:, None, None]
        return skip * x + self.out_proj(self.ln_f(h))


def diffusion_train_step(
    model: Denoiser,
    batch: torch.Tensor,  # (B, T, 2D) clean trajectories
    styles: torch.Tensor,  # (B,) int
    schedule: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
) -> float:
    """x0-prediction step: lambda_t ||X - D(noisy X, t, c)||^2, lambda_t = 1.

    Conditioning is dropped to the null embedding with the configured
    probability (classifier-free guidance training).
    """
    b = batch.shape[0]
    t_np = rng.integers(1, schedule.n_steps + 1, size=b)
    eps = torch.from_numpy(rng.standard_normal(batch.shape)).to(batch.dtype)
    ab = torch.from_numpy(schedule.alpha_bar[t_np]).to(batch.dtype)[:, None, None]
    noisy = torch.sqrt(ab) * batch + torch.sqrt(1.0 - ab) * eps

    drop = torch.from_numpy(rng.random(b) < model.cfg.cond_dropout)
    styles = torch.where(drop, torch.full_like(styles, model.null_style), styles)

    pred = model(noisy, torch.from_numpy(t_np), styles)
    loss = torch.mean((batch - pred) ** 2)
    if not torch.isfinite(loss):
        raise FloatingPointError("diffusion loss diverged (non-finite)")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def cfg_predict(
    model: Denoiser,
    x: torch.Tensor,
    t: torch.Tensor,
    style: torch.Tensor,
    scale: float,
) -> torch.Tensor:
    """uncond + scale * (cond - uncond); exact at the algebraic endpoints."""
    model.eval()
    with torch.no_grad():
        null = torch.full_like(style, model.null_style)
        if scale == 0.0:
            return model(x, t, null)
        cond = model(x, t, style)
        if scale == 1.0:
            return cond
        uncond = model(x, t, null)
        return uncond + scale * (cond - uncond)


def refine_follower(
    model: Denoiser,
    schedule: NoiseSchedule,
    leader: np.ndarray,  # (T, D)
    follower: np.ndarray,  # (T, D)
    t_r: int | None = None,
    style: int | None = None,
    guidance_scale: float | None = None,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Noise the follower half to inference step index t_r, then DDIM back to 0.

    The leader half of every intermediate state is re-clamped to `leader`
    bit-exactly (pass `trace` to record the states). Returns the refined
    follower half; t_r = 0 returns the input follower unchanged.
    """
    cfg = model.cfg
    if leader.shape != follower.shape:
        raise ValueError(f"leader {leader.shape} vs follower {follower.shape} shape mismatch")
    t_r = cfg.refine_t_index if t_r is None else t_r
    steps = inference_timesteps(schedule.n_steps, cfg.infer_steps)
    if not (0 <= t_r <= cfg.infer_steps):
        raise ValueError(f"t_r {t_r} outside the inference ladder [0, {cfg.infer_steps}]")
    if t_r == 0:
        return follower.copy()

    rng = rng or np.random.default_rng(0)
    scale = cfg.guidance_scale if guidance_scale is None else guidance_scale
    style_t = torch.tensor([model.null_style if style is None else style])

    t_start = int(steps[t_r])
    eps = rng.standard_normal(follower.shape)
    noisy_f = add_noise(follower, t_start, eps, schedule)
    x = np.concatenate([leader, noisy_f], axis=-1)
    x[:, : leader.shape[1]] = leader
    if trace is not None:
        trace.append(x.copy())

    dtype = next(model.parameters()).dtype
    for k in range(t_r, 0, -1):
        t, t_prev = int(steps[k]), int(steps[k - 1])
        xt = torch.from_numpy(x[None]).to(dtype)
        x0 = cfg_predict(model, xt, torch.tensor([t]), style_t, scale)[0].double().numpy()
        noise = rng.standard_normal(x.shape) if cfg.eta > 0 else None
        x = ddim_step(x, x0, t, t_prev, schedule, cfg.eta, noise)
        x[:, : leader.shape[1]] = leader  # bit-exact leader clamp
        if trace is not None:
            trace.append(x.copy())
    return x[:, leader.shape[1] :]


def save_denoiser(
    path, model: Denoiser, schedule: NoiseSchedule,
    norm_mean: np.ndarray, norm_std: np.ndarray, styles: list[str],
    metadata: dict | None = None,
) -> None:
    arrays = state_dict_to_arrays(model.state_dict())
    arrays["schedule.alpha_bar"] = schedule.alpha_bar.astype(np.float64)
    arrays["norm.mean"] = norm_mean.astype(np.float64)
    arrays["norm.std"] = norm_std.astype(np.float64)
    meta = dict(metadata or {})
    meta["styles"] = list(styles)
    save_checkpoint(path, "denoiser", asdict(model.cfg), arrays, meta)


def load_denoiser(path) -> tuple[Denoiser, NoiseSchedule, np.ndarray, np.ndarray, list[str], dict]:
    from .checkpoint import load_checkpoint

    ck = load_checkpoint(path)
    if ck.kind != "denoiser":
        raise ValueError(f"{path}: expected a denoiser checkpoint, got {ck.kind}")
    model = Denoiser(DenoiserConfig(**ck.config))
    extra = {"schedule.alpha_bar", "norm.mean", "norm.std"}
    model.load_state_dict(arrays_to_state_dict({k: v for k, v in ck.arrays.items() if k not in extra}))
    schedule = NoiseSchedule(len(ck.arrays["schedule.alpha_bar"]) - 1, ck.arrays["schedule.alpha_bar"].copy())
    return (
        model, schedule,
        ck.arrays["norm.mean"].copy(), ck.arrays["norm.std"].copy(),
        list(ck.metadata.get("styles", [])), ck.metadata,
    )
