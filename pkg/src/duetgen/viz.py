"""Stick-figure frame dumps for eyeballing duets (inspection only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataio import read_duet


def render_duet_frames(duet_path, out_dir, count: int = 8) -> list[Path]:
    duet, sk, _ = read_duet(duet_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    idx = np.linspace(0, len(duet) - 1, count).astype(int)
    bones = [(j, p) for j, p in enumerate(sk.parents) if p >= 0]
    written = []
    for i in idx:
        fig = plt.figure(figsize=(5, 5))
        ax = fig.add_subplot(projection="3d")
        for seq, color in ((duet.leader, "tab:red"), (duet.follower, "tab:blue")):
            pos = seq.positions[i]
            for j, p in bones:
                ax.plot(*zip(pos[j][[0, 2, 1]], pos[p][[0, 2, 1]]), color=color, lw=1.5)
        center = duet.leader.positions[i, 0]
        ax.set_xlim(center[0] - 2, center[0] + 2)
        ax.set_ylim(center[2] - 2, center[2] + 2)
        ax.set_zlim(0, 2)
        ax.set_title(f"{duet.seq_id} frame {i}")
        path = out_dir / f"{duet.seq_id}_{i:05d}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    return written
