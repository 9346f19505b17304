"""File formats: the duet motion container, beat-track JSON, token corpus,
and caption corpus.

Duet motion container (little-endian):
  bytes 0..7    magic b"DGDUET01"
  bytes 8..11   uint32 header length H
  bytes 12..12+H  UTF-8 JSON header: fps, n_joints, joint_names, parents,
                  rest_offsets, named joint indices, style, seq_id,
                  beat {bpm, onsets, accents, duration} or null, and an
                  "arrays" list ({name, shape, dtype}) describing the blobs
  then each blob's raw row-major bytes in header order.

Arrays are float32: leader_positions and follower_positions (T, N, 3) always;
leader_features / follower_features (T, 12N+4) optionally. Without feature
blobs, features are recomputed from positions on load.

Token corpus: first line "#duetgen-tokens {json metadata}", then one record
per line: "<seq_id>\t<role>\t<space-separated indices>" with roles leader /
follower / relation / audio. Caption corpus: "<seq_id>:<role>\t<window>\t<caption>".
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import BeatTrack
from .motion import (
    DuetSequence,
    MotionSequence,
    Skeleton,
    compute_features,
    relation_track,
    sequence_from_features,
)

_MAGIC = b"DGDUET01"

_NAMED = (
    "root", "left_heel", "left_toe", "right_heel", "right_toe",
    "left_shoulder", "right_shoulder", "left_wrist", "right_wrist",
    "head", "left_hip", "right_hip",
)


def write_duet(
    path: str | Path,
    duet: DuetSequence,
    skeleton: Skeleton,
    beat: BeatTrack | None = None,
    include_features: bool = False,
) -> None:
    arrays: dict[str, np.ndarray] = {
        "leader_positions": duet.leader.positions.astype(np.float32),
        "follower_positions": duet.follower.positions.astype(np.float32),
    }
    if include_features:
        arrays["leader_features"] = duet.leader.features().astype(np.float32)
        arrays["follower_features"] = duet.follower.features().astype(np.float32)
    header = {
        "fps": duet.fps,
        "n_joints": skeleton.joint_count,
        "joint_names": list(skeleton.joint_names),
        "parents": list(skeleton.parents),
        "rest_offsets": skeleton.rest_offsets.tolist(),
        "named": {k: getattr(skeleton, k) for k in _NAMED},
        "style": duet.style,
        "seq_id": duet.seq_id,
        "beat": None if beat is None else {
            "bpm": beat.bpm,
            "onsets": [float(x) for x in beat.onsets],
            "accents": [int(x) for x in beat.accents],
            "duration": beat.duration,
        },
        "arrays": [
            {"name": k, "shape": list(v.shape), "dtype": "float32"} for k, v in arrays.items()
        ],
        "version": 1,
    }
    hj = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(len(hj)).tobytes())
        f.write(hj)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v).tobytes())


def read_duet(path: str | Path) -> tuple[DuetSequence, Skeleton, BeatTrack | None]:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a duet motion file")
        (hlen,) = np.frombuffer(f.read(4), dtype=np.uint32)
        header = json.loads(f.read(int(hlen)).decode())
        arrays = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"]))
            arrays[spec["name"]] = (
                np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
                .reshape(spec["shape"]).astype(np.float64)
            )

    skeleton = Skeleton(
        tuple(header["joint_names"]),
        tuple(header["parents"]),
        np.asarray(header["rest_offsets"], dtype=np.float64),
        **{k: int(v) for k, v in header["named"].items()},
    )
    skeleton.validate()
    fps = float(header["fps"])

    def _track(prefix: str) -> MotionSequence:
        feats_name = f"{prefix}_features"
        if feats_name in arrays:
            return sequence_from_features(arrays[feats_name], skeleton.joint_count, fps)
        return compute_features(arrays[f"{prefix}_positions"], skeleton, fps)

    leader = _track("leader")
    follower = _track("follower")
    beat = None
    if header["beat"] is not None:
        b = header["beat"]
        beat = BeatTrack(
            float(b["bpm"]),
            np.asarray(b["onsets"], dtype=np.float64),
            np.asarray(b["accents"], dtype=np.int64),
            float(b["duration"]),
        )
    duet = DuetSequence(
        fps=fps,
        leader=leader,
        follower=follower,
        relation=relation_track(leader, follower),
        style=header.get("style"),
        beat_times=None if beat is None else beat.onsets.copy(),
        seq_id=header.get("seq_id", ""),
    )
    return duet, skeleton, beat


# ---------------------------------------------------------------------------
# token corpus


@dataclass
class TokenCorpus:
    metadata: dict
    # records[seq_id][role] -> np.ndarray of indices
    records: dict[str, dict[str, np.ndarray]]

    def roles(self, seq_id: str) -> dict[str, np.ndarray]:
        return self.records[seq_id]


def write_token_corpus(path: str | Path, corpus: TokenCorpus) -> None:
    with open(path, "w") as f:
        f.write("#duetgen-tokens " + json.dumps(corpus.metadata, sort_keys=True) + "\n")
        for seq_id in corpus.records:
            for role, idx in corpus.records[seq_id].items():
                f.write(f"{seq_id}\t{role}\t{' '.join(str(int(i)) for i in idx)}\n")


def read_token_corpus(path: str | Path) -> TokenCorpus:
    records: dict[str, dict[str, np.ndarray]] = {}
    metadata: dict = {}
    with open(path) as f:
        first = f.readline()
        if first.startswith("#duetgen-tokens "):
            metadata = json.loads(first[len("#duetgen-tokens "):])
        else:
            raise ValueError(f"{path}: missing token corpus header line")
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            seq_id, role, payload = line.split("\t")
            idx = np.array([int(x) for x in payload.split()] if payload else [], dtype=np.int64)
            records.setdefault(seq_id, {})[role] = idx
    return TokenCorpus(metadata, records)


# ---------------------------------------------------------------------------
# caption corpus


def write_caption_corpus(path: str | Path, rows: list[tuple[str, int, str]]) -> None:
    """rows: (sequence id with role suffix "seqNNN:role", window index, caption)."""
    with open(path, "w") as f:
        for seq_role, window, caption in rows:
            f.write(f"{seq_role}\t{window}\t{caption}\n")


def read_caption_corpus(path: str | Path) -> dict[tuple[str, str], dict[int, str]]:
    """-> {(seq_id, role): {window_index: caption}}"""
    out: dict[tuple[str, str], dict[int, str]] = {}
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            seq_role, window, caption = line.split("\t")
            seq_id, role = seq_role.split(":")
            out.setdefault((seq_id, role), {})[int(window)] = caption
    return out
