"""Decoder-only autoregressive transformer over the multimodal vocabulary.

Small from-scratch backbone (pre-LN blocks, learned absolute positions, tied
input/output embeddings) with LoRA adapters on the attention projections.
Stage I trains the backbone, LoRA factors, and the newly introduced
multimodal embedding rows while the text-word embedding rows (and therefore
the tied text output head) stay frozen. Stage II freezes everything except
the LoRA factors and trains on the leader-to-follower task alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import arrays_to_state_dict, save_checkpoint, state_dict_to_arrays
from .prompts import PromptSequence
from .vocab import Vocabulary


@dataclass
class LmConfig:
    vocab_size: int
    embed_dim: int = 256
    num_layers: int = 4
    num_heads: int = 8
    context_len: int = 1024
    dropout: float = 0.1
    lora_rank: int = 64
    lora_alpha: float = 64.0
    lora_dropout: float = 0.1
    lr_stage1: float = 2e-5
    lr_stage2: float = 1e-5
    stage1_epochs: int = 4
    stage2_epochs: int = 100
    batch_stage1: int = 8
    batch_stage2: int = 4
    temperature: float = 0.9
    top_k: int = 50

    def validate(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")


class LoraLinear(nn.Module):
    """Linear layer with an additive low-rank adapter.

    B is zero-initialized so the adapted layer equals the base layer until
    trained. Adapter output is scaled by alpha / rank.
    """

    def __init__(self, in_dim: int, out_dim: int, rank: int, alpha: float, dropout: float):
        super().__init__()
        self.base = nn.Linear(in_dim, out_dim)
        self.rank = rank
        self.scale = alpha / rank
        self.lora_a = nn.Parameter(torch.randn(rank, in_dim) / math.sqrt(rank))
        self.lora_b = nn.Parameter(torch.zeros(out_dim, rank))
        self.lora_dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = self.lora_dropout(x) @ self.lora_a.t() @ self.lora_b.t()
        return self.base(x) + self.scale * delta


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.embed_dim // cfg.num_heads
        mk = lambda: LoraLinear(
            cfg.embed_dim, cfg.embed_dim, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout
        )
        self.q_proj, self.k_proj, self.v_proj, self.o_proj = mk(), mk(), mk(), mk()
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        shape = (b, t, self.num_heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        att = att.masked_fill(causal, float("-inf"))
        att = self.dropout(torch.softmax(att, dim=-1))
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.o_proj(out)


class Block(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.embed_dim, 4 * cfg.embed_dim),
            nn.GELU(),
            nn.Linear(4 * cfg.embed_dim, cfg.embed_dim),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TransformerLM(nn.Module):
    """Tied-embedding decoder-only LM."""

    def __init__(self, cfg: LmConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.pos_emb = nn.Embedding(cfg.context_len, cfg.embed_dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.ln_f = nn.LayerNorm(cfg.embed_dim)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, T) int64 -> (B, T, V) logits; causal by construction."""
        b, t = ids.shape
        if t > self.cfg.context_len:
            raise ValueError(f"sequence length {t} exceeds context {self.cfg.context_len}")
        pos = torch.arange(t, device=ids.device)
        x = self.drop(self.tok_emb(ids) + self.pos_emb(pos)[None])
        for blk in self.blocks:
            x = blk(x)
        x = self.ln_f(x)
        return x @ self.tok_emb.weight.t()  # tied output head

    # -- parameter groups -----------------------------------------------

    def lora_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if "lora_" in n]

    def set_stage(self, stage: int, frozen_rows: np.ndarray | None = None) -> None:
        """Configure trainability.

        Stage 1: everything trains except the given embedding rows (text
        words and base specials); the tied output head freezes with them.
        The rows are pinned by restoring their values after every optimizer
        step (gradient masking alone would not survive AdamW weight decay).
        Stage 2: only LoRA factors train.
        """
        if stage == 1:
            for p in self.parameters():
                p.requires_grad_(True)
            self._frozen_rows = None
            if frozen_rows is not None and len(frozen_rows):
                idx = torch.from_numpy(np.asarray(frozen_rows, dtype=np.int64))
                self._frozen_rows = (idx, self.tok_emb.weight.detach()[idx].clone())
        elif stage == 2:
            for n, p in self.named_parameters():
                p.requires_grad_("lora_" in n)
            self._frozen_rows = None
        else:
            raise ValueError(f"unknown stage {stage}")

    def restore_frozen_rows(self) -> None:
        if getattr(self, "_frozen_rows", None) is not None:
            idx, values = self._frozen_rows
            with torch.no_grad():
                self.tok_emb.weight[idx] = values


def nll_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Sum over masked-in positions of -log p(target); masked-out adds exactly 0."""
    logp = F.log_softmax(logits, dim=-1)
    tgt = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(tgt * mask.to(logp.dtype)).sum()


def _batches(prompts: list[PromptSequence], batch_size: int, rng: np.random.Generator, pad_id: int):
    order = rng.permutation(len(prompts))
    # bucket by length within coarse shuffled spans to limit pad waste
    span = batch_size * 16
    bucketed = []
    for s in range(0, len(order), span):
        part = sorted(order[s : s + span], key=lambda i: len(prompts[i]))
        bucketed.extend(part)
    order = bucketed
    for s in range(0, len(prompts), batch_size):
        chunk = [prompts[i] for i in order[s : s + batch_size]]
        tmax = max(len(p) for p in chunk)
        ids = np.full((len(chunk), tmax), pad_id, dtype=np.int64)
        mask = np.zeros((len(chunk), tmax), dtype=np.int64)
        for r, p in enumerate(chunk):
            ids[r, : len(p)] = p.ids
            mask[r, : len(p)] = p.mask
        yield torch.from_numpy(ids), torch.from_numpy(mask)


def _run_training(
    model: TransformerLM,
    prompts: list[PromptSequence],
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    pad_id: int,
    log_every: int = 0,
) -> list[float]:
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr)
    history = []
    for epoch in range(epochs):
        model.train()
        total, count = 0.0, 0
        for ids, mask in _batches(prompts, batch_size, rng, pad_id):
            logits = model(ids[:, :-1])
            loss = nll_loss(logits, ids[:, 1:], mask[:, 1:])
            n_tok = int(mask[:, 1:].sum())
            if n_tok == 0:
                continue
            mean_loss = loss / n_tok
            if not torch.isfinite(mean_loss):
                raise FloatingPointError("LM loss diverged (non-finite)")
            opt.zero_grad()
            mean_loss.backward()
            opt.step()
            model.restore_frozen_rows()
            total += float(loss.item())
            count += n_tok
        history.append(total / max(count, 1))
        if log_every and (epoch + 1) % log_every == 0:
            print(f"lm epoch {epoch + 1}/{epochs} nll/token={history[-1]:.4f}")
    return history


def evaluate_nll(model: TransformerLM, prompts: list[PromptSequence], pad_id: int) -> float:
    """Mean per-token NLL over a prompt list."""
    model.eval()
    rng = np.random.default_rng(0)
    total, count = 0.0, 0
    with torch.no_grad():
        for ids, mask in _batches(prompts, 8, rng, pad_id):
            logits = model(ids[:, :-1])
            total += float(nll_loss(logits, ids[:, 1:], mask[:, 1:]).item())
            count += int(mask[:, 1:].sum())
    return total / max(count, 1)


def train_stage1(
    model: TransformerLM,
    vocab: Vocabulary,
    prompts: list[PromptSequence],
    rng: np.random.Generator,
    epochs: int | None = None,
    log_every: int = 0,
) -> list[float]:
    """Representation alignment: backbone + LoRA + multimodal embeddings train,
    text-word embedding rows (and the tied text head) stay frozen."""
    text_rows = np.arange(vocab.text_start, vocab.motion_start)
    frozen_rows = np.concatenate(
        [[vocab.special("<pad>"), vocab.special("<unk>"), vocab.special("<eos>")], text_rows]
    )
    model.set_stage(1, frozen_rows=frozen_rows)
    return _run_training(
        model, prompts, model.cfg.stage1_epochs if epochs is None else epochs,
        model.cfg.batch_stage1, model.cfg.lr_stage1, rng, vocab.special("<pad>"), log_every,
    )


def train_stage2(
    model: TransformerLM,
    vocab: Vocabulary,
    prompts: list[PromptSequence],
    rng: np.random.Generator,
    epochs: int | None = None,
    log_every: int = 0,
) -> list[float]:
    """Task-specific fine-tuning: only LoRA factors are trainable."""
    model.set_stage(2)
    return _run_training(
        model, prompts, model.cfg.stage2_epochs if epochs is None else epochs,
        model.cfg.batch_stage2, model.cfg.lr_stage2, rng, vocab.special("<pad>"), log_every,
    )


@dataclass
class GenerationResult:
    tokens: np.ndarray  # follower codebook indices
    truncated: bool  # no closing marker within the budget


def generate(
    model: TransformerLM,
    vocab: Vocabulary,
    prompt_ids: np.ndarray,
    max_tokens: int,
    mode: str = "sample",
    temperature: float | None = None,
    top_k: int | None = None,
    generator: torch.Generator | None = None,
) -> GenerationResult:
    res = generate_batch(
        model, vocab, [prompt_ids], max_tokens, mode, temperature, top_k, generator
    )
    return res[0]


def generate_batch(
    model: TransformerLM,
    vocab: Vocabulary,
    prompts: list[np.ndarray],
    max_tokens: int,
    mode: str = "sample",
    temperature: float | None = None,
    top_k: int | None = None,
    generator: torch.Generator | None = None,
) -> list[GenerationResult]:
    """Constrained decoding of follower spans for same-length prompts.

    Emitted ids are restricted to the motion-token range plus </follower>;
    generation stops per-row at </follower> or after max_tokens (flagged
    truncated). Prompts must end with the <follower> opener.
    """
    close_id = vocab.special("</follower>")
    opener = vocab.special("<follower>")
    lens = {len(p) for p in prompts}
    if len(lens) != 1:
        raise ValueError("generate_batch requires equal-length prompts")
    for p in prompts:
        if int(p[-1]) != opener:
            raise ValueError("prompt must end with the <follower> opener")

    temperature = model.cfg.temperature if temperature is None else temperature
    top_k = model.cfg.top_k if top_k is None else top_k

    allowed = torch.zeros(vocab.size, dtype=torch.bool)
    allowed[vocab.motion_start : vocab.relation_start] = True
    allowed[close_id] = True

    ids = torch.from_numpy(np.stack(prompts).astype(np.int64))
    b = ids.shape[0]
    done = torch.zeros(b, dtype=torch.bool)
    out_tokens: list[list[int]] = [[] for _ in range(b)]

    model.eval()
    with torch.no_grad():
        for _ in range(max_tokens + 1):  # +1 step of grace for the closer
            if bool(done.all()) or ids.shape[1] >= model.cfg.context_len:
                break
            logits = model(ids)[:, -1, :]
            logits = logits.masked_fill(~allowed[None, :], float("-inf"))
            if mode == "greedy" or temperature <= 0:
                nxt = torch.argmax(logits, dim=-1)
            elif mode == "sample":
                logits = logits / temperature
                if top_k and top_k > 0:
                    kth = torch.topk(logits, min(top_k, logits.shape[-1]), dim=-1).values[:, -1:]
                    logits = logits.masked_fill(logits < kth, float("-inf"))
                probs = torch.softmax(logits, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
            else:
                raise ValueError(f"unknown decoding mode {mode!r}")
            nxt = torch.where(done, torch.full_like(nxt, close_id), nxt)
            for r in range(b):
                if done[r]:
                    continue
                if int(nxt[r]) == close_id:
                    done[r] = True
                elif len(out_tokens[r]) < max_tokens:
                    out_tokens[r].append(int(nxt[r]) - vocab.motion_start)
                # a row at max_tokens gets one more step to emit the closer
            ids = torch.cat([ids, nxt[:, None]], dim=1)

    return [
        GenerationResult(np.array(toks, dtype=np.int64), not bool(done[r]))
        for r, toks in enumerate(out_tokens)
    ]


def save_lm(path, model: TransformerLM, vocab: Vocabulary, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta["vocab_manifest"] = vocab.manifest()
    arrays = state_dict_to_arrays(model.state_dict())
    save_checkpoint(path, "token_lm", asdict(model.cfg), arrays, meta)


def load_lm(path) -> tuple[TransformerLM, Vocabulary, dict]:
    from .checkpoint import load_checkpoint

    ck = load_checkpoint(path)
    if ck.kind != "token_lm":
        raise ValueError(f"{path}: expected a token_lm checkpoint, got {ck.kind}")
    model = TransformerLM(LmConfig(**ck.config))
    model.load_state_dict(arrays_to_state_dict(ck.arrays))
    vocab = Vocabulary.from_manifest(ck.metadata["vocab_manifest"])
    return model, vocab, ck.metadata
