"""Window VQ-VAEs for full-body motion and pairwise relation.

One latent per window (sequence-level 2-layer bidirectional GRU encoder,
unidirectional GRU decoder), nearest-neighbor quantization with lowest-index
tie-break, straight-through gradients, EMA codebook updates with dead-code
resets. Two instances are trained: motion windows (tau x (12N+4) features)
and relation windows (tau x 3).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import (
    Checkpoint,
    arrays_to_state_dict,
    save_checkpoint,
    state_dict_to_arrays,
)
from .geometry import RigidTransform2D, wrap_angle
from .motion import MotionSequence, canonicalize_window, sequence_from_features

EMA_EPS = 1e-5


@dataclass
class VqVaeConfig:
    input_dim: int
    latent_dim: int = 512
    codebook_size: int = 512
    tau: int = 20
    hidden_dim: int = 128
    num_layers: int = 2
    ema_decay: float = 0.95
    commitment_weight: float = 0.02
    velocity_weight: float = 0.1
    dead_code_threshold: float = 1.0
    warmup_epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 2048
    epochs: int = 2000
    scheduler_gamma: float = 0.05
    # channels treated as "positions" by the velocity loss (finite differences
    # of the reconstruction are matched to the target's); relation windows use
    # all 3 channels
    position_dim: int | None = None
    # motion features end with 4 contact flags that decode clamps + thresholds
    contact_channels: bool = False

    def validate(self) -> None:
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be >= 1")
        if not (0.0 < self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in (0, 1)")
        if self.commitment_weight < 0 or self.velocity_weight < 0:
            raise ValueError("loss weights must be >= 0")


class Codebook:
    """K code vectors with EMA cluster statistics (kept in float64)."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator | None = None):
        if size < 1:
            raise ValueError("empty codebook")
        rng = rng or np.random.default_rng(0)
        init = rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim))
        self.codes = torch.from_numpy(init).to(torch.float64)
        self.ema_size = torch.ones(size, dtype=torch.float64)
        self.ema_sum = self.codes.clone()
        self.usage = torch.zeros(size, dtype=torch.float64)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def lookup(self, indices) -> torch.Tensor:
        return self.codes[indices]

    def quantize(self, z: np.ndarray) -> tuple[int, np.ndarray]:
        """Nearest code for one latent; ties break to the lowest index."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise ValueError(f"latent shape {z.shape} != ({self.dim},)")
        d = np.sum((self.codes.numpy() - z[None, :]) ** 2, axis=1)
        k = int(np.argmin(d))  # np.argmin returns the first minimum
        return k, self.codes[k].numpy().copy()

    def quantize_batch(self, z: torch.Tensor) -> torch.Tensor:
        """Indices of nearest codes for latents (B, d)."""
        codes = self.codes.to(z.dtype)
        d = (
            torch.sum(z**2, dim=1, keepdim=True)
            - 2.0 * z @ codes.t()
            + torch.sum(codes**2, dim=1)
        )
        return torch.argmin(d, dim=1)

    def ema_update(self, latents: torch.Tensor, indices: torch.Tensor, decay: float) -> None:
        """N_k <- mu N_k + (1-mu) n_k, likewise for vector sums; codes = sum / (size + eps)."""
        mu = decay
        z = latents.detach().to(torch.float64)
        one_hot = torch.zeros(z.shape[0], self.size, dtype=torch.float64)
        one_hot.scatter_(1, indices.view(-1, 1), 1.0)
        counts = one_hot.sum(dim=0)
        sums = one_hot.t() @ z
        self.ema_size.mul_(mu).add_((1.0 - mu) * counts)
        self.ema_sum.mul_(mu).add_((1.0 - mu) * sums)
        self.codes = self.ema_sum / (self.ema_size.unsqueeze(1) + EMA_EPS)
        self.usage += counts

    def reset_dead_codes(
        self, recent_latents: torch.Tensor, threshold: float, rng: np.random.Generator
    ) -> list[int]:
        """Overwrite codes with EMA size < threshold (strict) by sampled latents."""
        if recent_latents.shape[0] < 1:
            raise ValueError("need at least one recent latent")
        pool = recent_latents.detach().to(torch.float64)
        dead = torch.nonzero(self.ema_size < threshold).flatten().tolist()
        for k in dead:
            pick = int(rng.integers(0, pool.shape[0]))
            self.codes[k] = pool[pick]
            self.ema_size[k] = 1.0
            self.ema_sum[k] = pool[pick]
        return dead

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "codebook.codes": self.codes.numpy().astype(np.float64),
            "codebook.ema_size": self.ema_size.numpy().astype(np.float64),
            "codebook.ema_sum": self.ema_sum.numpy().astype(np.float64),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.codes = torch.from_numpy(arrays["codebook.codes"].copy())
        self.ema_size = torch.from_numpy(arrays["codebook.ema_size"].copy())
        self.ema_sum = torch.from_numpy(arrays["codebook.ema_sum"].copy())
        self.usage = torch.zeros(self.size, dtype=torch.float64)


class WindowEncoder(nn.Module):
    """tau x D window -> one latent, via a bidirectional GRU."""

    def __init__(self, input_dim: int, hidden_dim: int, num_layers: int, latent_dim: int):
        super().__init__()
        self.gru = nn.GRU(
            input_dim, hidden_dim, num_layers=num_layers, bidirectional=True, batch_first=True
        )
        self.proj = nn.Linear(2 * hidden_dim, latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, tau, D) -> (B, d)
        _, h = self.gru(x)
        top = torch.cat([h[-2], h[-1]], dim=-1)  # final layer, both directions
        return self.proj(top)


class WindowDecoder(nn.Module):
    """Latent -> tau x D window, via a unidirectional GRU fed the latent each step."""

    def __init__(self, latent_dim: int, hidden_dim: int, num_layers: int, output_dim: int, tau: int):
        super().__init__()
        self.tau = tau
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.init_proj = nn.Linear(latent_dim, num_layers * hidden_dim)
        self.gru = nn.GRU(latent_dim, hidden_dim, num_layers=num_layers, batch_first=True)
        self.out = nn.Linear(hidden_dim, output_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:  # (B, d) -> (B, tau, D)
        b = z.shape[0]
        h0 = self.init_proj(z).view(b, self.num_layers, self.hidden_dim)
        h0 = h0.permute(1, 0, 2).contiguous()
        inp = z.unsqueeze(1).expand(b, self.tau, z.shape[1])
        out, _ = self.gru(inp, h0)
        return self.out(out)


class VqVae:
    """Encoder + codebook + decoder over standardized window features."""

    def __init__(self, config: VqVaeConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        self.encoder = WindowEncoder(
            config.input_dim, config.hidden_dim, config.num_layers, config.latent_dim
        )
        self.decoder = WindowDecoder(
            config.latent_dim, config.hidden_dim, config.num_layers, config.input_dim, config.tau
        )
        self.codebook = Codebook(config.codebook_size, config.latent_dim, rng)
        # per-channel standardization, fit on the training windows
        self.mean = np.zeros(config.input_dim, dtype=np.float64)
        self.std = np.ones(config.input_dim, dtype=np.float64)
        self._recent_latents: torch.Tensor | None = None

    # -- feature standardization ------------------------------------------

    def fit_standardizer(self, windows: np.ndarray) -> None:
        flat = windows.reshape(-1, windows.shape[-1])
        self.mean = flat.mean(axis=0)
        self.std = np.maximum(flat.std(axis=0), 1e-3)

    def _normalize(self, w: np.ndarray) -> np.ndarray:
        return (w - self.mean) / self.std

    def _denormalize(self, w: np.ndarray) -> np.ndarray:
        return w * self.std + self.mean

    # -- core ops ------------------------------------------------------------

    def encode(self, window: np.ndarray) -> np.ndarray:
        """One window (tau, D) of raw features -> latent (d,). Deterministic."""
        w = np.asarray(window, dtype=np.float64)
        if w.shape != (self.config.tau, self.config.input_dim):
            raise ValueError(
                f"window shape {w.shape} != ({self.config.tau}, {self.config.input_dim})"
            )
        x = torch.from_numpy(self._normalize(w)).to(torch.float32).unsqueeze(0)
        self.encoder.eval()
        with torch.no_grad():
            z = self.encoder(x)[0]
        return z.numpy().astype(np.float64)

    def decode_index(self, index: int) -> np.ndarray:
        """Token index -> raw-feature window (tau, D), contacts thresholded."""
        if not (0 <= index < self.codebook.size):
            raise ValueError(f"token index {index} out of range [0, {self.codebook.size})")
        return self.decode_vector(self.codebook.codes[index].numpy())

    def decode_vector(self, code: np.ndarray) -> np.ndarray:
        z = torch.from_numpy(np.asarray(code, dtype=np.float32)).unsqueeze(0)
        self.decoder.eval()
        with torch.no_grad():
            w = self.decoder(z)[0].numpy().astype(np.float64)
        w = self._denormalize(w)
        if self.config.contact_channels:
            # contact channels sit at the tail of motion features
            w[:, -4:] = (np.clip(w[:, -4:], 0.0, 1.0) >= 0.5).astype(np.float64)
        return w

    def _losses(self, batch: torch.Tensor) -> dict[str, torch.Tensor]:
        """Straight-through forward; batch is normalized (B, tau, D)."""
        z = self.encoder(batch)
        with torch.no_grad():
            idx = self.codebook.quantize_batch(z)
        code = self.codebook.lookup(idx).to(z.dtype)
        z_q = z + (code - z).detach()  # straight-through
        recon = self.decoder(z_q)

        losses = {
            "reconstruction": torch.mean((recon - batch) ** 2),
            "commitment": torch.mean((z - code.detach()) ** 2),
        }
        pdim = self.config.position_dim or batch.shape[-1]
        dv_recon = recon[:, 1:, :pdim] - recon[:, :-1, :pdim]
        dv_target = batch[:, 1:, :pdim] - batch[:, :-1, :pdim]
        losses["velocity"] = torch.mean((dv_recon - dv_target) ** 2)
        losses["_z"] = z
        losses["_idx"] = idx
        return losses

    def train_step(
        self, batch: np.ndarray, optimizer: torch.optim.Optimizer
    ) -> dict[str, float]:
        """One optimizer step; codebook updated by EMA, not gradients."""
        if batch.shape[0] < 1:
            raise ValueError("empty batch")
        x = torch.from_numpy(self._normalize(batch)).to(torch.float32)
        self.encoder.train()
        self.decoder.train()
        losses = self._losses(x)
        total = (
            losses["reconstruction"]
            + self.config.commitment_weight * losses["commitment"]
            + self.config.velocity_weight * losses["velocity"]
        )
        if not torch.isfinite(total):
            raise FloatingPointError(
                f"non-finite VQ loss: recon={losses['reconstruction'].item():.4g} "
                f"commit={losses['commitment'].item():.4g} vel={losses['velocity'].item():.4g}"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        self.codebook.ema_update(losses["_z"], losses["_idx"], self.config.ema_decay)
        self._remember_latents(losses["_z"].detach())
        return {
            "total": float(total.item()),
            "reconstruction": float(losses["reconstruction"].item()),
            "commitment": float(losses["commitment"].item()),
            "velocity": float(losses["velocity"].item()),
        }

    def _remember_latents(self, z: torch.Tensor, cap: int = 4096) -> None:
        if self._recent_latents is None:
            self._recent_latents = z[-cap:]
        else:
            self._recent_latents = torch.cat([self._recent_latents, z], dim=0)[-cap:]

    def train(
        self,
        windows: np.ndarray,
        rng: np.random.Generator,
        epochs: int | None = None,
        batch_size: int | None = None,
        log_every: int = 0,
    ) -> list[dict[str, float]]:
        """Full training loop over raw-feature windows (M, tau, D)."""
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        batch_size = cfg.batch_size if batch_size is None else batch_size
        self.fit_standardizer(windows)
        opt = torch.optim.AdamW(
            list(self.encoder.parameters()) + list(self.decoder.parameters()), lr=cfg.lr
        )
        sched_at = max(1, epochs // 2)
        history = []
        m = windows.shape[0]
        for epoch in range(epochs):
            if epoch == sched_at:
                for g in opt.param_groups:
                    g["lr"] *= cfg.scheduler_gamma
            order = rng.permutation(m)
            ep = {"total": 0.0, "reconstruction": 0.0, "commitment": 0.0, "velocity": 0.0}
            nb = 0
            for s in range(0, m, batch_size):
                batch = windows[order[s : s + batch_size]]
                step = self.train_step(batch, opt)
                for k in ep:
                    ep[k] += step[k]
                nb += 1
            for k in ep:
                ep[k] /= max(nb, 1)
            if epoch + 1 > cfg.warmup_epochs and self._recent_latents is not None:
                self.codebook.reset_dead_codes(
                    self._recent_latents, cfg.dead_code_threshold, rng
                )
            history.append(ep)
            if log_every and (epoch + 1) % log_every == 0:
                print(
                    f"vq epoch {epoch + 1}/{epochs} recon={ep['reconstruction']:.5f} "
                    f"commit={ep['commitment']:.5f} vel={ep['velocity']:.5f}"
                )
        return history

    # -- persistence -----------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        arrays = {}
        arrays.update(
            {f"encoder.{k}": v for k, v in state_dict_to_arrays(self.encoder.state_dict()).items()}
        )
        arrays.update(
            {f"decoder.{k}": v for k, v in state_dict_to_arrays(self.decoder.state_dict()).items()}
        )
        arrays.update(self.codebook.state_arrays())
        arrays["norm.mean"] = self.mean.astype(np.float64)
        arrays["norm.std"] = self.std.astype(np.float64)
        save_checkpoint(path, "vqvae", asdict(self.config), arrays, metadata)

    @classmethod
    def load(cls, path) -> "VqVae":
        from .checkpoint import load_checkpoint

        ck = load_checkpoint(path)
        if ck.kind != "vqvae":
            raise ValueError(f"{path}: expected a vqvae checkpoint, got {ck.kind}")
        return cls.from_checkpoint(ck)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "VqVae":
        cfg = VqVaeConfig(**ck.config)
        vq = cls(cfg)
        vq.encoder.load_state_dict(arrays_to_state_dict(ck.arrays, "encoder."))
        vq.decoder.load_state_dict(arrays_to_state_dict(ck.arrays, "decoder."))
        vq.codebook.load_state_arrays(ck.arrays)
        vq.mean = ck.arrays["norm.mean"].copy()
        vq.std = ck.arrays["norm.std"].copy()
        return vq


@dataclass
class TokenizedTrack:
    """Token indices with the bookkeeping needed to invert them."""

    indices: np.ndarray  # (W,) int
    starts: np.ndarray  # (W,) window start frames
    tau: int
    transforms: list[RigidTransform2D] | None = None  # motion tracks only

    def __len__(self) -> int:
        return len(self.indices)


def tokenize_motion(vq: VqVae, seq: MotionSequence, stride: int | None = None) -> TokenizedTrack:
    """Canonicalize windows of one person's track and quantize each."""
    tau = vq.config.tau
    stride = tau if stride is None else stride
    indices, starts, transforms = [], [], []
    for s in range(0, len(seq) - tau + 1, stride):
        win = canonicalize_window(seq.slice(s, s + tau), s)
        z = vq.encode(win.frames.features())
        k, _ = vq.codebook.quantize(z)
        indices.append(k)
        starts.append(s)
        transforms.append(win.to_world)
    return TokenizedTrack(np.array(indices, dtype=np.int64), np.array(starts), tau, transforms)


def detokenize_motion(vq: VqVae, track: TokenizedTrack, n_joints: int, fps: float) -> MotionSequence:
    """Decode each token and map windows back to world with stored transforms."""
    if track.transforms is None:
        raise ValueError("motion track is missing inverse transforms")
    parts = []
    for k, tf in zip(track.indices, track.transforms):
        feats = vq.decode_index(int(k))
        canonical = sequence_from_features(feats, n_joints, fps)
        parts.append(canonical.transformed(tf))
    return _concat_sequences(parts, fps)


def tokenize_relation(vq: VqVae, relation: np.ndarray, stride: int | None = None) -> TokenizedTrack:
    tau = vq.config.tau
    stride = tau if stride is None else stride
    indices, starts = [], []
    for s in range(0, relation.shape[0] - tau + 1, stride):
        z = vq.encode(relation[s : s + tau])
        k, _ = vq.codebook.quantize(z)
        indices.append(k)
        starts.append(s)
    return TokenizedTrack(np.array(indices, dtype=np.int64), np.array(starts), tau, None)


def detokenize_relation(vq: VqVae, track: TokenizedTrack) -> np.ndarray:
    parts = [vq.decode_index(int(k)) for k in track.indices]
    out = np.concatenate(parts, axis=0)
    out[:, 2] = wrap_angle(out[:, 2])
    return out


def _concat_sequences(parts: list[MotionSequence], fps: float) -> MotionSequence:
    return MotionSequence(
        fps,
        np.concatenate([p.positions for p in parts], axis=0),
        np.concatenate([p.velocities for p in parts], axis=0),
        np.concatenate([p.rotations for p in parts], axis=0),
        np.concatenate([p.contacts for p in parts], axis=0),
    )
