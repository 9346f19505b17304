"""Command-line entry point.

    duetgen <command> [--config cfg.ini] [--run DIR] [--seed N] [ablations...]

Commands: gen-data, train-vq, tokenize, describe, train-lm, generate,
refine, evaluate, report, all. Ablation flags --no-audio --no-captions
--no-relation --no-refine override the config file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import PipelineConfig, desk_config, load_config, smoke_config


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="duetgen", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="INI config file")
        p.add_argument("--preset", choices=("desk", "smoke", "paper"), default="desk",
                       help="built-in config preset when --config is absent")
        p.add_argument("--run", type=Path, required=True, help="run directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--no-audio", action="store_true")
        p.add_argument("--no-captions", action="store_true")
        p.add_argument("--no-relation", action="store_true")
        p.add_argument("--no-refine", action="store_true")
        p.add_argument("--log-every", type=int, default=0, help="progress print interval")

    for name in ("gen-data", "tokenize", "describe", "train-lm", "generate",
                 "refine", "evaluate", "report", "all"):
        common(sub.add_parser(name))
    p = sub.add_parser("train-vq")
    common(p)
    p.add_argument("--which", choices=("motion", "relation", "both"), default="both")
    p = sub.add_parser("render")
    common(p)
    p.add_argument("--in", dest="input", type=Path, required=False,
                   help="duet file to render (defaults to the first generated one)")
    p.add_argument("--out", dest="output", type=Path, required=False)
    p.add_argument("--frames", type=int, default=8)
    return ap


def _config_from_args(args) -> PipelineConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.preset == "smoke":
        cfg = smoke_config()
    elif args.preset == "paper":
        cfg = PipelineConfig()  # paper-scale defaults; expect long training
    else:
        cfg = desk_config()
    cfg.ablation.no_audio |= args.no_audio
    cfg.ablation.no_captions |= args.no_captions
    cfg.ablation.no_relation |= args.no_relation
    cfg.ablation.no_refine |= args.no_refine
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    cfg = _config_from_args(args)
    run, seed, log = args.run, cfg.seed, args.log_every

    try:
        if args.command == "gen-data":
            files = pipeline.cmd_gen_data(cfg, run, seed)
            print(f"wrote {len(files)} duet files under {run}/data")
        elif args.command == "train-vq":
            which = ("motion", "relation") if args.which == "both" else (args.which,)
            for w in which:
                p = pipeline.cmd_train_vq(cfg, run, w, seed, log_every=log)
                print(f"saved {p}")
        elif args.command == "tokenize":
            print(f"saved {pipeline.cmd_tokenize(cfg, run, seed)}")
        elif args.command == "describe":
            print(f"saved {pipeline.cmd_describe(cfg, run, seed)}")
        elif args.command == "train-lm":
            print(f"saved {pipeline.cmd_train_lm(cfg, run, seed, log_every=log)}")
        elif args.command == "generate":
            files = pipeline.cmd_generate(cfg, run, seed)
            print(f"wrote {len(files)} generated duets under {run}/gen")
        elif args.command == "refine":
            files = pipeline.cmd_refine(cfg, run, seed, log_every=log)
            print(f"wrote {len(files)} refined duets under {run}/refined")
        elif args.command == "evaluate":
            reports = pipeline.cmd_evaluate(cfg, run, seed)
            for name in sorted(reports):
                print(f"{name}: FID_cd={reports[name].fid_cd:.4f} BAS={reports[name].bas:.4f}")
        elif args.command == "report":
            table, csv_path = pipeline.cmd_report(cfg, run)
            print(Path(table).read_text())
            print(f"csv: {csv_path}")
        elif args.command == "all":
            pipeline.run_full_pipeline(cfg, run, seed, log_every=log)
            table, _ = pipeline.cmd_report(cfg, run)
            print(Path(table).read_text())
        elif args.command == "render":
            from .viz import render_duet_frames

            src = args.input or pipeline.RunPaths(Path(run)).duet_files("gen")[0]
            out_dir = args.output or (Path(run) / "frames")
            files = render_duet_frames(src, out_dir, args.frames)
            print(f"wrote {len(files)} frames under {out_dir}")
    except pipeline.PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
