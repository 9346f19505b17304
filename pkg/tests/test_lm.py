import numpy as np
import pytest
import torch

from duetgen.lm import (
    GenerationResult,
    LmConfig,
    TransformerLM,
    evaluate_nll,
    generate,
    generate_batch,
    load_lm,
    nll_loss,
    save_lm,
    train_stage1,
    train_stage2,
)
from duetgen.prompts import PromptSequence, assemble_prompt, build_stage2_prompt, ClipRecord
from duetgen.vocab import build_default_vocabulary


@pytest.fixture(scope="module")
def vocab():
    return build_default_vocabulary(16, 8, 32)


def toy_model(vocab, **kw):
    base = dict(vocab_size=vocab.size, embed_dim=32, num_layers=2, num_heads=4,
                context_len=64, dropout=0.0, lora_rank=4, lora_alpha=4.0, lora_dropout=0.0)
    base.update(kw)
    torch.manual_seed(0)
    return TransformerLM(LmConfig(**base))


def test_embed_dim_divisible_by_heads(vocab):
    with pytest.raises(ValueError):
        TransformerLM(LmConfig(vocab_size=vocab.size, embed_dim=30, num_heads=4))


def test_causality_future_permutation(vocab):
    model = toy_model(vocab)
    model.eval()
    rng = np.random.default_rng(0)
    ids = rng.integers(0, vocab.size, (1, 20))
    with torch.no_grad():
        base = model(torch.from_numpy(ids))
    for t in range(19):
        shuffled = ids.copy()
        shuffled[0, t + 1 :] = rng.permutation(shuffled[0, t + 1 :])
        with torch.no_grad():
            out = model(torch.from_numpy(shuffled))
        assert torch.allclose(out[0, : t + 1], base[0, : t + 1], atol=1e-5)


def test_context_overflow_rejected(vocab):
    model = toy_model(vocab)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 65, dtype=torch.int64))


def test_lora_zero_init_identity(vocab):
    model = toy_model(vocab)
    model.eval()
    ids = torch.from_numpy(np.random.default_rng(1).integers(0, vocab.size, (2, 12)))
    with torch.no_grad():
        adapted = model(ids)
        for name, p in model.named_parameters():
            if "lora_b" in name:
                assert torch.all(p == 0)
        # zero the A factors too: output must be bit-identical (B=0 already kills them)
        backup = [p.clone() for n, p in model.named_parameters() if "lora_a" in n]
        for n, p in model.named_parameters():
            if "lora_a" in n:
                p.zero_()
        base = model(ids)
    assert torch.equal(adapted, base)
    with torch.no_grad():
        for (n, p), b in zip(
            [(n, p) for n, p in model.named_parameters() if "lora_a" in n], backup
        ):
            p.copy_(b)


def test_nll_uniform_logits_is_ln_v():
    v = 37
    logits = torch.zeros(1, 1, v, dtype=torch.float64)
    loss = nll_loss(logits, torch.tensor([[3]]), torch.tensor([[1]]))
    assert abs(loss.item() - np.log(v)) < 1e-9


def test_nll_zero_mask_zero_loss():
    logits = torch.randn(2, 5, 11)
    targets = torch.randint(0, 11, (2, 5))
    assert nll_loss(logits, targets, torch.zeros(2, 5)).item() == 0.0


def test_nll_confident_target_loss_to_zero():
    logits = torch.full((1, 1, 4), -30.0)
    logits[0, 0, 2] = 30.0
    loss = nll_loss(logits, torch.tensor([[2]]), torch.tensor([[1]]))
    assert loss.item() < 1e-9


def test_nll_mask_linearity():
    rng = torch.Generator().manual_seed(2)
    logits = torch.randn(3, 7, 13, generator=rng, dtype=torch.float64)
    targets = torch.randint(0, 13, (3, 7), generator=rng)
    mask = (torch.rand(3, 7, generator=rng) > 0.5).long()
    total = nll_loss(logits, targets, mask)
    per_pos = sum(
        nll_loss(logits[i : i + 1, j : j + 1], targets[i : i + 1, j : j + 1],
                 mask[i : i + 1, j : j + 1]).item()
        for i in range(3) for j in range(7)
    )
    assert abs(total.item() - per_pos) < 1e-9


def test_gradient_check_finite_differences(vocab):
    torch.manual_seed(3)
    cfg = LmConfig(vocab_size=30, embed_dim=16, num_layers=2, num_heads=2,
                   context_len=16, dropout=0.0, lora_rank=2, lora_alpha=2.0,
                   lora_dropout=0.0)
    model = TransformerLM(cfg).double()
    ids = torch.randint(0, 30, (2, 10))
    targets = torch.randint(0, 30, (2, 9))
    mask = torch.ones(2, 9)

    def loss_fn():
        return nll_loss(model(ids[:, :9]), targets, mask)

    loss = loss_fn()
    model.zero_grad()
    loss.backward()

    rng = np.random.default_rng(4)
    h = 1e-4
    num, den = 0.0, 0.0
    params = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
    for p in params:
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


def _l2f_prompt(vocab, follower=(3, 1, 2)):
    return assemble_prompt(
        vocab, "lead2follow", audio_tokens=[1, 2], leader_tokens=[4, 5],
        relation_tokens=[0], follower_tokens=list(follower),
    )


def test_stage1_freezes_text_rows(vocab):
    model = toy_model(vocab)
    text_rows = np.arange(vocab.text_start, vocab.motion_start)
    before = model.tok_emb.weight[torch.from_numpy(text_rows)].clone()
    before_motion = model.tok_emb.weight[vocab.motion_start].clone()
    prompts = [_l2f_prompt(vocab)] * 4
    train_stage1(model, vocab, prompts, np.random.default_rng(0), epochs=2)
    after = model.tok_emb.weight[torch.from_numpy(text_rows)]
    assert torch.equal(before, after)  # bit-identical frozen rows
    assert not torch.equal(before_motion, model.tok_emb.weight[vocab.motion_start])


def test_stage2_trains_only_lora(vocab):
    model = toy_model(vocab)
    emb_before = model.tok_emb.weight.clone()
    base_before = model.blocks[0].attn.q_proj.base.weight.clone()
    lora_before = model.blocks[0].attn.q_proj.lora_b.clone()
    prompts = [_l2f_prompt(vocab)] * 4
    train_stage2(model, vocab, prompts, np.random.default_rng(0), epochs=2)
    assert torch.equal(emb_before, model.tok_emb.weight)
    assert torch.equal(base_before, model.blocks[0].attn.q_proj.base.weight)
    assert not torch.equal(lora_before, model.blocks[0].attn.q_proj.lora_b)


def test_stage2_improves_l2f_loss(vocab):
    torch.manual_seed(5)
    model = toy_model(vocab, lr_stage1=1e-3, lr_stage2=1e-3)
    prompts = [_l2f_prompt(vocab, follower=(3, 1, 2)), _l2f_prompt(vocab, follower=(3, 1, 2))]
    train_stage1(model, vocab, prompts, np.random.default_rng(0), epochs=3)
    before = evaluate_nll(model, prompts, vocab.special("<pad>"))
    train_stage2(model, vocab, prompts, np.random.default_rng(1), epochs=20)
    after = evaluate_nll(model, prompts, vocab.special("<pad>"))
    assert after <= before


def test_generate_requires_follower_opener(vocab):
    model = toy_model(vocab)
    bad = np.array([vocab.special("<sys>")])
    with pytest.raises(ValueError):
        generate(model, vocab, bad, 4, mode="greedy")


def test_generate_rigged_closer_gives_empty(vocab):
    import types

    model = toy_model(vocab)
    closer = vocab.special("</follower>")

    def rigged(self, ids):
        out = torch.zeros(ids.shape[0], ids.shape[1], vocab.size)
        out[:, :, closer] = 10.0
        return out

    model.forward = types.MethodType(rigged, model)
    prompt = assemble_prompt(vocab, "lead2follow", leader_tokens=[1], inference=True)
    res = generate(model, vocab, prompt.ids, 6, mode="greedy")
    assert res.tokens.size == 0 and not res.truncated


def test_generate_greedy_deterministic(vocab):
    model = toy_model(vocab)
    prompt = assemble_prompt(
        vocab, "lead2follow", audio_tokens=[1, 2], leader_tokens=[3, 4],
        relation_tokens=[5], inference=True,
    )
    a = generate(model, vocab, prompt.ids, 5, mode="greedy")
    b = generate(model, vocab, prompt.ids, 5, mode="greedy")
    assert np.array_equal(a.tokens, b.tokens)


def test_generate_constrained_to_motion_range(vocab):
    model = toy_model(vocab)
    prompt = assemble_prompt(vocab, "lead2follow", leader_tokens=[0], inference=True)
    gen = torch.Generator().manual_seed(0)
    res = generate(model, vocab, prompt.ids, 8, mode="sample", temperature=2.0,
                   top_k=0, generator=gen)
    assert np.all(res.tokens >= 0) and np.all(res.tokens < vocab.k_motion)


def test_generate_truncation_flag(vocab):
    import types

    model = toy_model(vocab)
    motion0 = vocab.motion_id(0)

    def rigged(self, ids):  # never emits the closer
        out = torch.zeros(ids.shape[0], ids.shape[1], vocab.size)
        out[:, :, motion0] = 10.0
        return out

    model.forward = types.MethodType(rigged, model)
    prompt = assemble_prompt(vocab, "lead2follow", leader_tokens=[1], inference=True)
    res = generate(model, vocab, prompt.ids, 3, mode="greedy")
    assert res.truncated and len(res.tokens) == 3


def test_generate_batch_equal_lengths_required(vocab):
    model = toy_model(vocab)
    p1 = assemble_prompt(vocab, "lead2follow", leader_tokens=[1], inference=True)
    p2 = assemble_prompt(vocab, "lead2follow", leader_tokens=[1, 2], inference=True)
    with pytest.raises(ValueError):
        generate_batch(model, vocab, [p1.ids, p2.ids], 4)


def test_memorization_single_sequence(vocab):
    torch.manual_seed(6)
    model = toy_model(vocab, embed_dim=64, num_layers=2, num_heads=4,
                      lr_stage1=3e-3)
    target = [3, 1, 2, 5]
    prompt = _l2f_prompt(vocab, follower=target)
    rng = np.random.default_rng(0)
    train_stage1(model, vocab, [prompt] * 8, rng, epochs=40)
    inference = assemble_prompt(
        vocab, "lead2follow", audio_tokens=[1, 2], leader_tokens=[4, 5],
        relation_tokens=[0], inference=True,
    )
    res = generate(model, vocab, inference.ids, 8, mode="greedy")
    assert list(res.tokens) == target and not res.truncated


def test_save_load_round_trip(vocab, tmp_path):
    model = toy_model(vocab)
    path = tmp_path / "lm.ckpt"
    save_lm(path, model, vocab, metadata={"stage2": {"epochs": 100, "batch": 4}})
    back, vocab2, meta = load_lm(path)
    assert meta["stage2"] == {"epochs": 100, "batch": 4}
    assert vocab2.size == vocab.size
    ids = torch.randint(0, vocab.size, (1, 10))
    model.eval()
    back.eval()
    with torch.no_grad():
        assert torch.allclose(model(ids), back(ids), atol=1e-6)


def test_paper_defaults_recorded():
    cfg = LmConfig(vocab_size=100)
    assert cfg.stage2_epochs == 100 and cfg.batch_stage2 == 4
    assert cfg.lr_stage1 == 2e-5 and cfg.lr_stage2 == 1e-5
    assert cfg.lora_rank == 64 and cfg.lora_alpha == 64.0 and cfg.lora_dropout == 0.1
