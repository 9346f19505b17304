"""Command-level workflow: synthetic data, tokenizer/LM/prior training,
generation, refinement, evaluation, and reporting, all under one run
directory with a manifest.

Follower world placement at inference: each decoded canonical follower
window is anchored by the leader's world root pose at the window's first
frame composed with the decoded relation for that instant (the conditioning
initial-relation token); from the second window on, the anchor is blended
equal-weight (root XZ, shortest-arc yaw midpoint) with the previous placed
window's final pose for continuity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import audio as audio_mod
from . import dataio, describer, lm as lm_mod, metrics as metrics_mod
from .checkpoint import config_hash
from .config import PipelineConfig
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    NoiseSchedule,
    cfg_predict,
    cosine_schedule,
    ddim_step,
    diffusion_train_step,
    inference_timesteps,
    load_denoiser,
    save_denoiser,
)
from .geometry import RigidTransform2D, wrap_angle
from .motion import (
    DuetSequence,
    MotionSequence,
    canonicalize_window,
    relation_track,
    relation_world_pose,
    RelationFrame,
    sequence_from_features,
    velocities_from_positions,
    feature_dim,
)
from .prompts import ClipRecord, build_stage1_prompts, build_stage2_prompt
from .synthetic import SyntheticDuetSpec, generate_corpus
from .vocab import Vocabulary, build_default_vocabulary
from .vq import VqVae, VqVaeConfig, tokenize_motion, tokenize_relation

TAU = 20


class PipelineError(RuntimeError):
    pass


_COMMAND_SALT = {
    "gen-data": 1, "train-vq-motion": 2, "train-vq-relation": 3, "tokenize": 4,
    "describe": 5, "train-lm": 6, "generate": 7, "refine": 8, "evaluate": 9,
}


def _rng_for(seed: int, command: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _COMMAND_SALT[command])))


def _torch_seed(seed: int, command: str) -> None:
    torch.manual_seed(seed * 1000 + _COMMAND_SALT[command])


@dataclass
class RunPaths:
    root: Path

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def gen_dir(self) -> Path:
        return self.root / "gen"

    @property
    def refined_dir(self) -> Path:
        return self.root / "refined"

    def duet_files(self, which: str) -> list[Path]:
        d = {"data": self.data_dir, "gen": self.gen_dir, "refined": self.refined_dir}[which]
        return sorted(d.glob("*.duet"))

    vq_motion = property(lambda self: self.root / "vq_motion.ckpt")
    vq_relation = property(lambda self: self.root / "vq_relation.ckpt")
    tokens = property(lambda self: self.root / "tokens.txt")
    captions = property(lambda self: self.root / "captions.txt")
    lm = property(lambda self: self.root / "lm.ckpt")
    denoiser = property(lambda self: self.root / "diffusion.ckpt")
    manifest = property(lambda self: self.root / "manifest.json")

    def metrics(self, which: str) -> Path:
        return self.root / f"metrics_{which}.json"


def _require(path: Path, stage: str, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(f"stage '{stage}': missing input {path}; run '{producer}' first")
    return path


def _update_manifest(paths: RunPaths, cfg: PipelineConfig, stage: str, info: dict) -> None:
    paths.root.mkdir(parents=True, exist_ok=True)
    manifest = {}
    if paths.manifest.exists():
        manifest = json.loads(paths.manifest.read_text())
    manifest.setdefault("config", cfg.to_dict())
    manifest["config_hash"] = config_hash(cfg.to_dict())
    manifest.setdefault("stages", {})[stage] = info
    paths.manifest.write_text(json.dumps(manifest, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: PipelineConfig, run_dir: str | Path, seed: int | None = None) -> list[Path]:
    seed = cfg.seed if seed is None else seed
    paths = RunPaths(Path(run_dir))
    paths.data_dir.mkdir(parents=True, exist_ok=True)
    spec = SyntheticDuetSpec(
        bpm=cfg.data.bpm, bpm_jitter=cfg.data.bpm_jitter, duration=cfg.data.duration,
        fps=cfg.data.fps, lag_frames=cfg.data.lag_frames,
        noise_amplitude=cfg.data.noise_amplitude, seed=seed,
    )
    out = []
    for duet, beat in generate_corpus(spec, cfg.data.count, seed):
        from .motion import default_skeleton

        p = paths.data_dir / f"{duet.seq_id}.duet"
        dataio.write_duet(p, duet, default_skeleton(), beat)
        (paths.data_dir / f"{duet.seq_id}.beat.json").write_text(
            audio_mod.beat_track_to_json(beat)
        )
        out.append(p)
    _update_manifest(paths, cfg, "gen-data", {"count": len(out), "seed": seed})
    return out


# ---------------------------------------------------------------------------
# train-vq


def _collect_windows(paths: RunPaths) -> tuple[np.ndarray, np.ndarray, int]:
    """All canonicalized motion windows (both roles) and raw relation windows."""
    from .motion import windowize

    motion_wins, relation_wins = [], []
    n_joints = None
    for f in paths.duet_files("data"):
        duet, sk, _ = dataio.read_duet(f)
        n_joints = sk.joint_count
        for lw, fw, rw in windowize(duet, TAU):
            motion_wins.append(lw.frames.features())
            motion_wins.append(fw.frames.features())
            relation_wins.append(rw)
    return np.stack(motion_wins), np.stack(relation_wins), n_joints


def cmd_train_vq(
    cfg: PipelineConfig, run_dir: str | Path, which: str, seed: int | None = None,
    log_every: int = 0,
) -> Path:
    seed = cfg.seed if seed is None else seed
    paths = RunPaths(Path(run_dir))
    command = f"train-vq-{which}"
    _require(paths.data_dir, command, "gen-data")
    rng = _rng_for(seed, command)
    _torch_seed(seed, command)

    motion_wins, relation_wins, n_joints = _collect_windows(paths)
    section = cfg.vq_motion if which == "motion" else cfg.vq_relation
    if which == "motion":
        data = motion_wins
        vq_cfg = VqVaeConfig(
            input_dim=feature_dim(n_joints), tau=TAU, position_dim=3 * n_joints,
            contact_channels=True,
        )
        out_path = paths.vq_motion
    elif which == "relation":
        data = relation_wins
        vq_cfg = VqVaeConfig(input_dim=3, tau=TAU, position_dim=3)
        out_path = paths.vq_relation
    else:
        raise ValueError(f"unknown tokenizer {which!r} (motion|relation)")

    for name in ("latent_dim", "codebook_size", "hidden_dim", "num_layers", "epochs",
                 "batch_size", "lr", "ema_decay", "commitment_weight", "velocity_weight",
                 "dead_code_threshold", "warmup_epochs", "scheduler_gamma"):
        setattr(vq_cfg, name, getattr(section, name))

    vq = VqVae(vq_cfg, rng)
    history = vq.train(data, rng, log_every=log_every)
    vq.save(out_path, metadata={"seed": seed, "final_losses": history[-1], "which": which})
    _update_manifest(paths, cfg, command, {"windows": int(data.shape[0]), "seed": seed,
                                           "final_recon": history[-1]["reconstruction"]})
    return out_path


# ---------------------------------------------------------------------------
# tokenize


def _circular_mean(angles: np.ndarray) -> float:
    return float(np.arctan2(np.mean(np.sin(angles)), np.mean(np.cos(angles))))


def cmd_tokenize(cfg: PipelineConfig, run_dir: str | Path, seed: int | None = None) -> Path:
    seed = cfg.seed if seed is None else seed
    paths = RunPaths(Path(run_dir))
    _require(paths.vq_motion, "tokenize", "train-vq motion")
    _require(paths.vq_relation, "tokenize", "train-vq relation")
    vq_m = VqVae.load(paths.vq_motion)
    vq_r = VqVae.load(paths.vq_relation)

    records: dict[str, dict[str, np.ndarray]] = {}
    initial_relations = []
    rel_decode_err = 0.0
    motion_root_err = 0.0
    for f in paths.duet_files("data"):
        duet, sk, beat = dataio.read_duet(f)
        lt = tokenize_motion(vq_m, duet.leader)
        ft = tokenize_motion(vq_m, duet.follower)
        rt = tokenize_relation(vq_r, duet.relation)
        stream = audio_mod.tokenize_audio(beat, hop=1.0 / duet.fps, k_audio=512)
        span = len(lt) * TAU
        records[duet.seq_id] = {
            "leader": lt.indices, "follower": ft.indices, "relation": rt.indices,
            "audio": stream.tokens[:span],
        }
        initial_relations.append(duet.relation[0])
        # bookkeeping for the placement-recovery bound
        for w, k in enumerate(rt.indices):
            dec = vq_r.decode_index(int(k))
            err = np.abs(dec - duet.relation[w * TAU : (w + 1) * TAU])
            err[:, 2] = np.abs(wrap_angle(err[:, 2]))
            rel_decode_err = max(rel_decode_err, float(err.max()))
        for w, k in enumerate(ft.indices):
            dec = vq_m.decode_index(int(k))
            true = canonicalize_window(duet.follower.slice(w * TAU, (w + 1) * TAU)).frames
            root_err = np.abs(dec[[0, -1], 0:3] - true.positions[[0, -1], 0].reshape(2, 3))
            motion_root_err = max(motion_root_err, float(root_err.max()))

    ir = np.stack(initial_relations)
    metadata = {
        "tau": TAU,
        "fps": cfg.data.fps,
        "k_motion": vq_m.config.codebook_size,
        "k_relation": vq_r.config.codebook_size,
        "k_audio": 512,
        "vq_motion_hash": config_hash(vq_m.config.__dict__),
        "vq_relation_hash": config_hash(vq_r.config.__dict__),
        "mean_initial_relation": [
            float(ir[:, 0].mean()), float(ir[:, 1].mean()), _circular_mean(ir[:, 2]),
        ],
        "relation_decode_err": rel_decode_err,
        "motion_root_decode_err": motion_root_err,
        "seed": seed,
    }
    corpus = dataio.TokenCorpus(metadata, records)
    dataio.write_token_corpus(paths.tokens, corpus)
    _update_manifest(paths, cfg, "tokenize", {"sequences": len(records)})
    return paths.tokens


# ---------------------------------------------------------------------------
# describe


def cmd_describe(cfg: PipelineConfig, run_dir: str | Path, seed: int | None = None) -> Path:
    from .motion import windowize

    paths = RunPaths(Path(run_dir))
    _require(paths.data_dir, "describe", "gen-data")
    rows = []
    for f in paths.duet_files("data"):
        duet, sk, _ = dataio.read_duet(f)
        for lw, fw, _rw in windowize(duet, TAU):
            wl = describer.describe_window(lw, sk)
            wf = describer.describe_window(fw, sk)
            rows.append((f"{duet.seq_id}:leader", lw.start // TAU, wl.text))
            rows.append((f"{duet.seq_id}:follower", fw.start // TAU, wf.text))
    dataio.write_caption_corpus(paths.captions, rows)
    _update_manifest(paths, cfg, "describe", {"rows": len(rows)})
    return paths.captions


# ---------------------------------------------------------------------------
# clip assembly


def _clip_caption(captions: dict[int, str], w0: int, w1: int) -> str:
    parts = []
    for w in range(w0, w1):
        text = captions.get(w, "")
        if text and (not parts or parts[-1] != text):
            parts.append(text)
    return " then ".join(parts)


def build_clip_records(
    corpus: dataio.TokenCorpus,
    captions: dict[tuple[str, str], dict[int, str]] | None,
    clip_windows: int,
    tau: int = TAU,
) -> list[ClipRecord]:
    records = []
    for seq_id in sorted(corpus.records):
        roles = corpus.records[seq_id]
        n_win = len(roles["leader"])
        for w0 in range(0, n_win, clip_windows):
            w1 = min(w0 + clip_windows, n_win)
            cap_l = cap_f = ""
            if captions is not None:
                cap_l = _clip_caption(captions.get((seq_id, "leader"), {}), w0, w1)
                cap_f = _clip_caption(captions.get((seq_id, "follower"), {}), w0, w1)
            records.append(ClipRecord(
                seq_id=seq_id,
                start_window=w0,
                audio=roles["audio"][w0 * tau : w1 * tau],
                leader=roles["leader"][w0:w1],
                relation=roles["relation"][w0:w1],
                follower=roles["follower"][w0:w1],
                leader_caption=cap_l,
                follower_caption=cap_f,
            ))
    return records


# ---------------------------------------------------------------------------
# train-lm


def cmd_train_lm(
    cfg: PipelineConfig, run_dir: str | Path, seed: int | None = None, log_every: int = 0
) -> Path:
    seed = cfg.seed if seed is None else seed
    paths = RunPaths(Path(run_dir))
    _require(paths.tokens, "train-lm", "tokenize")
    corpus = dataio.read_token_corpus(paths.tokens)
    captions = None
    if not cfg.ablation.no_captions:
        _require(paths.captions, "train-lm", "describe")
        captions = dataio.read_caption_corpus(paths.captions)

    vocab = build_default_vocabulary(
        corpus.metadata["k_motion"], corpus.metadata["k_relation"], corpus.metadata["k_audio"]
    )
    rng = _rng_for(seed, "train-lm")
    _torch_seed(seed, "train-lm")

    lm_cfg = lm_mod.LmConfig(
        vocab_size=vocab.size,
        embed_dim=cfg.lm.embed_dim, num_layers=cfg.lm.num_layers,
        num_heads=cfg.lm.num_heads, context_len=cfg.lm.context_len,
        dropout=cfg.lm.dropout, lora_rank=cfg.lm.lora_rank,
        lora_alpha=cfg.lm.lora_alpha, lora_dropout=cfg.lm.lora_dropout,
        lr_stage1=cfg.lm.lr_stage1, lr_stage2=cfg.lm.lr_stage2,
        stage1_epochs=cfg.lm.stage1_epochs, stage2_epochs=cfg.lm.stage2_epochs,
        batch_stage1=cfg.lm.batch_stage1, batch_stage2=cfg.lm.batch_stage2,
        temperature=cfg.lm.temperature, top_k=cfg.lm.top_k,
    )
    model = lm_mod.TransformerLM(lm_cfg)

    records = build_clip_records(corpus, captions, cfg.lm.clip_windows)
    tasks_per_clip = cfg.lm.stage1_tasks_per_clip
    stage1 = build_stage1_prompts(
        vocab, records, use_captions=captions is not None,
        tasks_per_clip=None if tasks_per_clip >= 8 else tasks_per_clip,
    )
    stage2 = [
        build_stage2_prompt(
            vocab, rec,
            use_audio=not cfg.ablation.no_audio,
            use_relation=not cfg.ablation.no_relation,
        )
        for rec in records
    ]
    hist1 = lm_mod.train_stage1(model, vocab, stage1, rng, log_every=log_every)
    hist2 = lm_mod.train_stage2(model, vocab, stage2, rng, log_every=log_every)

    lm_mod.save_lm(paths.lm, model, vocab, metadata={
        "seed": seed,
        "ablation": cfg.ablation.tag(),
        "stage1": {"epochs": lm_cfg.stage1_epochs, "batch": lm_cfg.batch_stage1,
                   "lr": lm_cfg.lr_stage1, "loss": hist1},
        "stage2": {"epochs": lm_cfg.stage2_epochs, "batch": lm_cfg.batch_stage2,
                   "lr": lm_cfg.lr_stage2, "loss": hist2},
        "vq_motion_hash": corpus.metadata["vq_motion_hash"],
        "vq_relation_hash": corpus.metadata["vq_relation_hash"],
        "mean_initial_relation": corpus.metadata["mean_initial_relation"],
    })
    _update_manifest(paths, cfg, "train-lm", {
        "stage1_final": hist1[-1] if hist1 else None,
        "stage2_final": hist2[-1] if hist2 else None,
        "prompts": {"stage1": len(stage1), "stage2": len(stage2)},
    })
    return paths.lm


# ---------------------------------------------------------------------------
# follower placement


def place_follower(
    decoded_windows: list[np.ndarray],
    leader: MotionSequence,
    relations: list[RelationFrame],
    n_joints: int,
    fps: float,
    tau: int = TAU,
    blend: bool = True,
) -> MotionSequence:
    """World-frame follower track from decoded canonical windows.

    Window w is anchored at the leader's root pose at frame w*tau composed
    with relations[w]; from window 1 on, the anchor is blended equal-weight
    with the previous placed window's final root pose.
    """
    if len(decoded_windows) != len(relations):
        raise ValueError("one relation per decoded window required")
    leader_yaws = leader.root_yaws()
    parts: list[MotionSequence] = []
    prev_xz: np.ndarray | None = None
    prev_yaw = 0.0
    for w, feats in enumerate(decoded_windows):
        seq = sequence_from_features(feats, n_joints, fps)
        seq = canonicalize_window(seq).frames  # snap first frame exactly to origin
        start = w * tau
        anchor_xz, anchor_yaw = relation_world_pose(
            leader.positions[start, 0, [0, 2]], leader_yaws[start], relations[w]
        )
        if blend and prev_xz is not None:
            anchor_xz = 0.5 * (anchor_xz + prev_xz)
            anchor_yaw = wrap_angle(prev_yaw + 0.5 * wrap_angle(anchor_yaw - prev_yaw))
        tf = RigidTransform2D(float(anchor_xz[0]), float(anchor_xz[1]), float(anchor_yaw))
        placed = seq.transformed(tf)
        parts.append(placed)
        prev_xz = placed.positions[-1, 0, [0, 2]]
        prev_yaw = placed.root_yaws()[-1]
    positions = np.concatenate([p.positions for p in parts], axis=0)
    rotations = np.concatenate([p.rotations for p in parts], axis=0)
    contacts = np.concatenate([p.contacts for p in parts], axis=0)
    velocities = velocities_from_positions(positions, fps)
    return MotionSequence(fps, positions, velocities, rotations, contacts)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(
    cfg: PipelineConfig, run_dir: str | Path, seed: int | None = None
) -> list[Path]:
    seed = cfg.seed if seed is None else seed
    paths = RunPaths(Path(run_dir))
    _require(paths.lm, "generate", "train-lm")
    _require(paths.tokens, "generate", "tokenize")
    _require(paths.vq_motion, "generate", "train-vq motion")
    _require(paths.vq_relation, "generate", "train-vq relation")

    model, vocab, meta = lm_mod.load_lm(paths.lm)
    corpus = dataio.read_token_corpus(paths.tokens)
    vq_m = VqVae.load(paths.vq_motion)
    vq_r = VqVae.load(paths.vq_relation)
    for name, vq in (("vq_motion_hash", vq_m), ("vq_relation_hash", vq_r)):
        if meta.get(name) != config_hash(vq.config.__dict__):
            raise PipelineError(
                f"stage 'generate': {name} in the LM checkpoint does not match "
                f"the loaded tokenizer (config-hash mismatch)"
            )

    gen = torch.Generator().manual_seed(seed * 1000 + _COMMAND_SALT["generate"])
    paths.gen_dir.mkdir(parents=True, exist_ok=True)

    # assemble all inference prompts, grouped by prompt length for batching
    records = build_clip_records(corpus, None, cfg.lm.clip_windows)
    prompts = []
    for rec in records:
        seq_relation = corpus.records[rec.seq_id]["relation"]
        rec_inf = ClipRecord(
            rec.seq_id, rec.start_window, rec.audio, rec.leader,
            seq_relation[:1], rec.follower,
        )
        p = build_stage2_prompt(
            vocab, rec_inf,
            use_audio=not cfg.ablation.no_audio,
            use_relation=not cfg.ablation.no_relation,
            inference=True, initial_relation_only=True,
        )
        prompts.append((rec, p))

    by_len: dict[int, list[int]] = {}
    for i, (_, p) in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    results: dict[int, np.ndarray] = {}
    for plen in sorted(by_len):
        idxs = by_len[plen]
        for s in range(0, len(idxs), 64):
            chunk = idxs[s : s + 64]
            batch = [prompts[i][1].ids for i in chunk]
            max_new = max(len(prompts[i][0].leader) for i in chunk)
            outs = lm_mod.generate_batch(
                model, vocab, batch, max_new,
                mode=cfg.lm.decoding, temperature=cfg.lm.temperature,
                top_k=cfg.lm.top_k, generator=gen,
            )
            for i, res in zip(chunk, outs):
                results[i] = res.tokens

    # stitch clips back into sequences and place followers
    out_paths = []
    default_rel = meta.get("mean_initial_relation")
    for f in paths.duet_files("data"):
        duet, sk, beat = dataio.read_duet(f)
        seq_id = duet.seq_id
        toks: list[int] = []
        for i, (rec, _) in enumerate(prompts):
            if rec.seq_id != seq_id:
                continue
            want = len(rec.leader)
            got = list(results[i][:want])
            while len(got) < want:  # short/truncated output: repeat last token
                got.append(got[-1] if got else 0)
            toks.extend(got)
        n_win = len(toks)
        span = n_win * TAU

        if cfg.ablation.no_relation:
            rel = RelationFrame(*default_rel)
        else:
            rel_window = vq_r.decode_index(int(corpus.records[seq_id]["relation"][0]))
            rel = RelationFrame(
                float(rel_window[0, 0]), float(rel_window[0, 1]),
                float(wrap_angle(rel_window[0, 2])),
            )
        decoded = [vq_m.decode_index(int(k)) for k in toks]
        follower = place_follower(
            decoded, duet.leader, [rel] * n_win, sk.joint_count, duet.fps
        )
        leader_crop = duet.leader.slice(0, span)
        gen_duet = DuetSequence(
            fps=duet.fps, leader=leader_crop, follower=follower,
            relation=relation_track(leader_crop, follower),
            style=duet.style, beat_times=duet.beat_times, seq_id=seq_id,
        )
        p = paths.gen_dir / f"{seq_id}.duet"
        dataio.write_duet(p, gen_duet, sk, beat)
        out_paths.append(p)
    _update_manifest(paths, cfg, "generate", {"sequences": len(out_paths)})
    return out_paths


# ---------------------------------------------------------------------------
# diffusion refinement


def _duet_crop_features(duet: DuetSequence, start: int, length: int):
    """Canonicalize a crop by the leader's first frame; both dancers share it."""
    lead = duet.leader.slice(start, start + length)
    foll = duet.follower.slice(start, start + length)
    win = canonicalize_window(lead, start)
    inv = win.to_world.inverse()
    return win.frames.features(), foll.transformed(inv).features(), win.to_world


def _crop_starts(total: int, crop: int, stride: int) -> list[int]:
    if total <= crop:
        return [0]
    starts = list(range(0, total - crop + 1, stride))
    if starts[-1] != total - crop:
        starts.append(total - crop)
    return starts


def train_denoiser(
    cfg: PipelineConfig, paths: RunPaths, seed: int, log_every: int = 0
) -> Path:
    rng = _rng_for(seed, "refine")
    _torch_seed(seed, "refine")
    dsec = cfg.diffusion

    crops, styles = [], []
    style_names: list[str] = []
    n_joints = None
    for f in paths.duet_files("data"):
        duet, sk, _ = dataio.read_duet(f)
        n_joints = sk.joint_count
        if duet.style not in style_names:
            style_names.append(duet.style)
        t = len(duet)
        length = min(dsec.crop_len, t)
        for s in _crop_starts(t, length, dsec.crop_stride):
            lf, ff, _ = _duet_crop_features(duet, s, length)
            crops.append(np.concatenate([lf, ff], axis=1))
            styles.append(duet.style)
    style_names = sorted(style_names)
    data = np.stack(crops)  # (M, crop, 2D)
    style_ids = np.array([style_names.index(s) for s in styles], dtype=np.int64)

    flat = data.reshape(-1, data.shape[-1])
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-3)
    data = (data - mean) / std

    den_cfg = DenoiserConfig(
        feature_dim=2 * feature_dim(n_joints),
        hidden_dim=dsec.hidden_dim, num_layers=dsec.num_layers, num_heads=dsec.num_heads,
        num_styles=len(style_names), train_steps=dsec.train_steps,
        infer_steps=dsec.infer_steps, eta=dsec.eta, guidance_scale=dsec.guidance_scale,
        cond_dropout=dsec.cond_dropout, lr=dsec.lr, batch_size=dsec.batch_size,
        opt_steps=dsec.opt_steps, crop_len=dsec.crop_len, refine_t_index=dsec.refine_t_index,
    )
    model = Denoiser(den_cfg)
    schedule = cosine_schedule(den_cfg.train_steps)
    opt = torch.optim.AdamW(model.parameters(), lr=den_cfg.lr)
    tensor = torch.from_numpy(data).to(torch.float32)
    losses = []
    for step in range(den_cfg.opt_steps):
        pick = rng.integers(0, tensor.shape[0], size=den_cfg.batch_size)
        loss = diffusion_train_step(
            model, tensor[pick], torch.from_numpy(style_ids[pick]), schedule, opt, rng
        )
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            print(f"diffusion step {step + 1}/{den_cfg.opt_steps} loss={loss:.4f}")
    save_denoiser(
        paths.denoiser, model, schedule, mean, std, style_names,
        metadata={"seed": seed, "final_loss": losses[-1], "crops": int(tensor.shape[0])},
    )
    return paths.denoiser


def refine_duet(
    model: Denoiser,
    schedule: NoiseSchedule,
    mean: np.ndarray,
    std: np.ndarray,
    style_idx: int | None,
    duet: DuetSequence,
    cfg: PipelineConfig,
    rng: np.random.Generator,
) -> MotionSequence:
    """Refine the follower of one duet with sliding crops and linear cross-fade."""
    dsec = cfg.diffusion
    t = len(duet)
    length = min(dsec.crop_len, t)
    starts = _crop_starts(t, length, dsec.crop_stride)
    d = duet.leader.features().shape[1]

    lead_feats, foll_feats, transforms = [], [], []
    for s in starts:
        lf, ff, tf = _duet_crop_features(duet, s, length)
        lead_feats.append((lf - mean[:d]) / std[:d])
        foll_feats.append((ff - mean[d:]) / std[d:])
        transforms.append(tf)

    # batched refinement: all crops march down the same DDIM ladder together
    t_r = dsec.refine_t_index
    steps = inference_timesteps(schedule.n_steps, dsec.infer_steps)
    leader_b = np.stack(lead_feats)
    foll_b = np.stack(foll_feats)
    if t_r > 0:
        eps = rng.standard_normal(foll_b.shape)
        ab = schedule.alpha_bar[int(steps[t_r])]
        noisy = np.sqrt(ab) * foll_b + np.sqrt(1.0 - ab) * eps
        x = np.concatenate([leader_b, noisy], axis=-1)
        x[..., :d] = leader_b
        style_t = torch.full((x.shape[0],), model.null_style if style_idx is None else style_idx,
                             dtype=torch.int64)
        dtype = next(model.parameters()).dtype
        for k in range(t_r, 0, -1):
            tt, tp = int(steps[k]), int(steps[k - 1])
            xt = torch.from_numpy(x).to(dtype)
            x0 = cfg_predict(
                model, xt, torch.full((x.shape[0],), tt), style_t, dsec.guidance_scale
            ).double().numpy()
            noise = rng.standard_normal(x.shape) if dsec.eta > 0 else None
            x = ddim_step(x, x0, tt, tp, schedule, dsec.eta, noise)
            x[..., :d] = leader_b
        refined_crops = x[..., d:]
    else:
        refined_crops = foll_b

    # cross-fade the de-normalized, de-canonicalized crops
    acc = np.zeros((t, d))
    wsum = np.zeros(t)
    fade = max(length - dsec.crop_stride, 1)
    for i, s in enumerate(starts):
        feats = refined_crops[i] * std[d:] + mean[d:]
        world = sequence_from_features(feats, duet.leader.n_joints, duet.fps)
        world = world.transformed(transforms[i]).features()
        w = np.ones(length)
        if i > 0:
            w[:fade] = np.linspace(1.0 / (fade + 1), 1.0, fade, endpoint=False)
        if i < len(starts) - 1:
            w[length - fade:] = np.minimum(
                w[length - fade:], np.linspace(1.0, 1.0 / (fade + 1), fade, endpoint=False)
            )
        acc[s : s + length] += w[:, None] * world
        wsum[s : s + length] += w
    feats = acc / wsum[:, None]

    seq = sequence_from_features(feats, duet.leader.n_joints, duet.fps)
    positions = seq.positions
    velocities = velocities_from_positions(positions, duet.fps)
    contacts = (np.clip(seq.contacts, 0.0, 1.0) >= 0.5).astype(np.float64)
    return MotionSequence(duet.fps, positions, velocities, seq.rotations, contacts)


def cmd_refine(
    cfg: PipelineConfig, run_dir: str | Path, seed: int | None = None, log_every: int = 0
) -> list[Path]:
    seed = cfg.seed if seed is None else seed
    paths = RunPaths(Path(run_dir))
    if cfg.ablation.no_refine:
        _update_manifest(paths, cfg, "refine", {"skipped": True})
        return []
    _require(paths.gen_dir, "refine", "generate")
    if not paths.denoiser.exists():
        _require(paths.data_dir, "refine", "gen-data")
        train_denoiser(cfg, paths, seed, log_every=log_every)
    model, schedule, mean, std, style_names, _meta = load_denoiser(paths.denoiser)
    rng = _rng_for(seed, "refine")

    paths.refined_dir.mkdir(parents=True, exist_ok=True)
    out = []
    for f in paths.duet_files("gen"):
        duet, sk, beat = dataio.read_duet(f)
        style_idx = style_names.index(duet.style) if duet.style in style_names else None
        follower = refine_duet(model, schedule, mean, std, style_idx, duet, cfg, rng)
        refined = DuetSequence(
            fps=duet.fps, leader=duet.leader, follower=follower,
            relation=relation_track(duet.leader, follower),
            style=duet.style, beat_times=duet.beat_times, seq_id=duet.seq_id,
        )
        p = paths.refined_dir / f"{duet.seq_id}.duet"
        dataio.write_duet(p, refined, sk, beat)
        out.append(p)
    _update_manifest(paths, cfg, "refine", {"sequences": len(out)})
    return out


# ---------------------------------------------------------------------------
# evaluate + report


def _feature_sets(files: list[Path], ref_len: int | None = None):
    from .motion import default_skeleton

    sk = default_skeleton()
    kin, gra, cross, bed_v, bas_v = [], [], [], [], []
    for f in files:
        duet, sk, beat = dataio.read_duet(f)
        span = len(duet) if ref_len is None else min(ref_len, len(duet))
        leader = duet.leader.slice(0, span)
        follower = duet.follower.slice(0, span)
        crop = DuetSequence(duet.fps, leader, follower, duet.relation[:span], duet.style)
        kin.append(metrics_mod.kinematic_features(follower))
        gra.append(metrics_mod.graphical_features(follower, sk))
        cross.append(metrics_mod.crossdist_features(crop, sk))
        fb = metrics_mod.motion_beats(follower)
        lb = metrics_mod.motion_beats(leader)
        bed_v.append(metrics_mod.bed(lb, fb, duet.fps))
        if beat is not None and len(beat.onsets):
            music = beat.onsets[beat.onsets < span / duet.fps]
            bas_v.append(metrics_mod.bas(fb, music, duet.fps))
    return np.stack(kin), np.stack(gra), np.stack(cross), bed_v, bas_v


def cmd_evaluate(cfg: PipelineConfig, run_dir: str | Path, seed: int | None = None) -> dict:
    seed = cfg.seed if seed is None else seed
    paths = RunPaths(Path(run_dir))
    _require(paths.data_dir, "evaluate", "gen-data")
    gt_files = paths.duet_files("data")
    gen_files = paths.duet_files("gen")
    span = None
    if gen_files:
        first, _, _ = dataio.read_duet(gen_files[0])
        span = len(first)
    gt_k, gt_g, gt_cd, gt_bed, gt_bas = _feature_sets(gt_files, span)
    chash = config_hash(cfg.to_dict())

    reports = {}
    reports["groundtruth"] = metrics_mod.evaluate_sets(
        gt_k, gt_g, gt_cd, gt_k, gt_g, gt_cd, gt_bed, gt_bas,
        cfg.eval.div_pairs, seed, chash,
    )
    targets = [("generated", gen_files)]
    if not cfg.ablation.no_refine:
        targets.append(("refined", paths.duet_files("refined")))
    for name, files in targets:
        if not files:
            raise PipelineError(
                f"stage 'evaluate': no {name} duets under {paths.root}; "
                f"run '{'generate' if name == 'generated' else 'refine'}' first"
            )
        k, g, cd, bed_v, bas_v = _feature_sets(files, span)
        reports[name] = metrics_mod.evaluate_sets(
            gt_k, gt_g, gt_cd, k, g, cd, bed_v, bas_v, cfg.eval.div_pairs, seed, chash
        )
    for name, rep in reports.items():
        paths.metrics(name).write_text(rep.to_json())
    _update_manifest(paths, cfg, "evaluate", {"reports": sorted(reports)})
    return reports


_COLUMNS = ("fid_k", "fid_g", "div_k", "div_g", "fid_cd", "div_cd", "bed", "bas")


def cmd_report(cfg: PipelineConfig, run_dir: str | Path) -> tuple[Path, Path]:
    paths = RunPaths(Path(run_dir))
    rows = []
    for name in ("groundtruth", "generated", "refined"):
        p = paths.metrics(name)
        if p.exists():
            rows.append((name, metrics_mod.MetricReport.from_json(p.read_text())))
    if not rows:
        raise PipelineError("stage 'report': no metrics_*.json found; run 'evaluate' first")

    lines = [
        f"{'':14s} {'Solo Metrics':^31s} {'Interactive Metrics':^23s} {'Rhythmic':^7s}",
        f"{'output':14s} {'FID_k':>7s} {'FID_g':>7s} {'Div_k':>7s} {'Div_g':>7s} "
        f"{'FID_cd':>7s} {'Div_cd':>7s} {'BED':>7s} {'BAS':>7s}",
    ]
    for name, rep in rows:
        vals = " ".join(f"{getattr(rep, c):7.4f}" for c in _COLUMNS)
        lines.append(f"{name:14s} {vals}")
    table = paths.root / "report.txt"
    table.write_text("\n".join(lines) + "\n")

    csv_path = paths.root / "report.csv"
    with open(csv_path, "w") as f:
        f.write("output," + ",".join(_COLUMNS) + "\n")
        for name, rep in rows:
            f.write(name + "," + ",".join(repr(getattr(rep, c)) for c in _COLUMNS) + "\n")
    return table, csv_path


def clone_run_inputs(src_run: str | Path, dst_run: str | Path, diffusion: bool = True) -> None:
    """Symlink the ablation-independent artifacts of one run into another.

    Ground-truth data, the frozen tokenizers, token/caption corpora, and the
    diffusion prior do not depend on the prompt-side ablation switches, so
    ablation arms can share them (training settings stay matched).
    """
    src, dst = RunPaths(Path(src_run)), RunPaths(Path(dst_run))
    dst.root.mkdir(parents=True, exist_ok=True)
    links = [
        (src.data_dir, dst.data_dir),
        (src.vq_motion, dst.vq_motion),
        (src.vq_relation, dst.vq_relation),
        (src.tokens, dst.tokens),
        (src.captions, dst.captions),
    ]
    if diffusion:
        links.append((src.denoiser, dst.denoiser))
    for a, b in links:
        if a.exists() and not b.exists():
            b.symlink_to(a.resolve())


# ---------------------------------------------------------------------------
# orchestration helper (used by tests and documented in the README)


def run_full_pipeline(
    cfg: PipelineConfig, run_dir: str | Path, seed: int | None = None, log_every: int = 0
) -> dict:
    """gen-data .. report in sequence; returns the evaluate reports."""
    seed = cfg.seed if seed is None else seed
    cmd_gen_data(cfg, run_dir, seed)
    cmd_train_vq(cfg, run_dir, "motion", seed, log_every=log_every)
    cmd_train_vq(cfg, run_dir, "relation", seed, log_every=log_every)
    cmd_tokenize(cfg, run_dir, seed)
    if not cfg.ablation.no_captions:
        cmd_describe(cfg, run_dir, seed)
    cmd_train_lm(cfg, run_dir, seed, log_every=log_every)
    cmd_generate(cfg, run_dir, seed)
    cmd_refine(cfg, run_dir, seed, log_every=log_every)
    reports = cmd_evaluate(cfg, run_dir, seed)
    cmd_report(cfg, run_dir)
    return reports
