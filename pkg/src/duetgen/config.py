"""Pipeline configuration: nested dataclass sections, INI-file loading, and
the desk / smoke presets the CLI and tests run with.

The config file is standard INI ([section] / key = value); keys map 1:1 onto
the dataclass fields below and values are coerced to the field's type.
Ablation switches mirror the CLI flags --no-audio --no-captions
--no-relation --no-refine.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, asdict
from pathlib import Path


@dataclass
class DataSection:
    count: int = 64
    duration: float = 60.0
    fps: float = 20.0
    bpm: float = 105.0
    bpm_jitter: float = 15.0
    lag_frames: int = 2
    noise_amplitude: float = 0.02


@dataclass
class VqSection:
    latent_dim: int = 512
    codebook_size: int = 512
    hidden_dim: int = 128
    num_layers: int = 2
    epochs: int = 2000
    batch_size: int = 2048
    lr: float = 1e-4
    ema_decay: float = 0.95
    commitment_weight: float = 0.02
    velocity_weight: float = 0.1
    dead_code_threshold: float = 1.0
    warmup_epochs: int = 5
    scheduler_gamma: float = 0.05


@dataclass
class LmSection:
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
    stage1_tasks_per_clip: int = 8  # rotating subset of the 8 task families
    clip_windows: int = 8  # windows per training/inference clip
    temperature: float = 0.9
    top_k: int = 50
    decoding: str = "sample"  # sample | greedy


@dataclass
class DiffusionSection:
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    train_steps: int = 1000  # diffusion chain length
    infer_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 3.5
    cond_dropout: float = 0.1
    lr: float = 1e-4
    batch_size: int = 16
    opt_steps: int = 800
    crop_len: int = 100
    crop_stride: int = 50
    refine_t_index: int = 10


@dataclass
class EvalSection:
    div_pairs: int = 32
    beat_sigma_frames: float = 3.0


@dataclass
class AblationSection:
    no_audio: bool = False
    no_captions: bool = False
    no_relation: bool = False
    no_refine: bool = False

    def tag(self) -> str:
        parts = [
            name for name, on in (
                ("no_audio", self.no_audio), ("no_captions", self.no_captions),
                ("no_relation", self.no_relation), ("no_refine", self.no_refine),
            ) if on
        ]
        return "full" if not parts else "+".join(parts)


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    vq_motion: VqSection = field(default_factory=VqSection)
    vq_relation: VqSection = field(default_factory=lambda: VqSection(latent_dim=32))
    lm: LmSection = field(default_factory=LmSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "data": "data",
    "vq_motion": "vq_motion",
    "vq_relation": "vq_relation",
    "lm": "lm",
    "diffusion": "diffusion",
    "eval": "eval",
    "ablation": "ablation",
}


def _coerce(value: str, typ):
    if typ is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    return typ(value)


def load_config(path: str | Path) -> PipelineConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)
    cfg = PipelineConfig()
    for section_name, attr in _SECTIONS.items():
        if not parser.has_section(section_name):
            continue
        target = getattr(cfg, attr)
        fields = {f.name: f.type for f in dataclasses.fields(target)}
        types = {f.name: type(getattr(target, f.name)) for f in dataclasses.fields(target)}
        for key, raw in parser.items(section_name):
            if key not in fields:
                raise KeyError(f"unknown config key [{section_name}] {key}")
            setattr(target, key, _coerce(raw, types[key]))
    if parser.has_option("run", "seed"):
        cfg.seed = parser.getint("run", "seed")
    return cfg


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    for section_name, attr in _SECTIONS.items():
        target = getattr(cfg, attr)
        parser[section_name] = {
            f.name: str(getattr(target, f.name)) for f in dataclasses.fields(target)
        }
    parser["run"] = {"seed": str(cfg.seed)}
    with open(path, "w") as f:
        parser.write(f)


def desk_config() -> PipelineConfig:
    """64 x 60 s corpus with training sizes tuned for a few CPU minutes/stage."""
    cfg = PipelineConfig()
    cfg.vq_motion.epochs = 30
    cfg.vq_motion.batch_size = 1024
    cfg.vq_motion.lr = 1.2e-3
    cfg.vq_relation.epochs = 20
    cfg.vq_relation.batch_size = 1024
    cfg.vq_relation.lr = 8e-4
    cfg.vq_relation.hidden_dim = 64
    cfg.lm.stage1_epochs = 1
    cfg.lm.stage2_epochs = 3
    cfg.lm.batch_stage1 = 16
    cfg.lm.batch_stage2 = 8
    cfg.lm.lr_stage1 = 4e-4
    cfg.lm.lr_stage2 = 2e-4
    cfg.lm.stage1_tasks_per_clip = 3
    cfg.lm.context_len = 320
    cfg.diffusion.opt_steps = 1000
    return cfg


def smoke_config() -> PipelineConfig:
    """8 x 30 s corpus; full pipeline in a couple of minutes for CI."""
    cfg = desk_config()
    cfg.data.count = 8
    cfg.data.duration = 30.0
    cfg.vq_motion.epochs = 18
    cfg.vq_motion.batch_size = 256
    cfg.vq_relation.epochs = 12
    cfg.vq_relation.batch_size = 256
    cfg.lm.stage1_epochs = 1
    cfg.lm.stage2_epochs = 2
    cfg.diffusion.opt_steps = 250
    return cfg
