"""Objective duet evaluation: solo FID/Div over kinematic and graphical
features, interactive FID/Div over leader-follower cross-distance features,
and the rhythmic scores BED (follower-to-leader beats) and BAS
(motion-to-music beats).

Feature spaces (fixed layouts, documented here as the contract):
  kinematic  (3 * N_j dims): per-joint mean speed, mean squared speed,
             mean acceleration magnitude
  graphical  (16 dims): time-averaged boolean pose/heading relations,
             invariant to common world yaw + translation
  cross-distance (18 dims): mean and std over time of 9 leader-to-follower
             joint distances (root-root, 4 wrist-wrist, 4 root-wrist)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .geometry import wrap_angle
from .motion import DuetSequence, MotionSequence, Skeleton

BEAT_SIGMA_FRAMES = 3.0
GRAPHICAL_DIM = 16


def kinematic_features(seq: MotionSequence) -> np.ndarray:
    """(3 N_j,) per-joint speed / energy / acceleration statistics."""
    if len(seq) < 2:
        raise ValueError("need at least 2 frames")
    speed = np.linalg.norm(seq.velocities, axis=-1)  # (T, N)
    accel = np.diff(seq.velocities, axis=0) * seq.fps
    accel_mag = np.linalg.norm(accel, axis=-1)
    return np.concatenate([
        speed.mean(axis=0),
        (speed**2).mean(axis=0),
        accel_mag.mean(axis=0),
    ])


def graphical_features(seq: MotionSequence, sk: Skeleton) -> np.ndarray:
    """(16,) time-averaged boolean relations, each in [0, 1]."""
    p = seq.positions
    yaws = seq.root_yaws()
    c, s = np.cos(yaws), np.sin(yaws)

    def in_facing_frame(vecs):  # world XZ vectors -> body frame of the root
        x = c * vecs[:, 0] - s * vecs[:, 1]
        z = s * vecs[:, 0] + c * vecs[:, 1]
        return x, z

    root = p[:, sk.root]
    lw, rw = p[:, sk.left_wrist], p[:, sk.right_wrist]
    head = p[:, sk.head]
    lf, rf = p[:, sk.left_toe], p[:, sk.right_toe]

    _, lw_z = in_facing_frame(lw[:, [0, 2]] - root[:, [0, 2]])
    _, rw_z = in_facing_frame(rw[:, [0, 2]] - root[:, [0, 2]])
    _, lf_z = in_facing_frame(lf[:, [0, 2]] - root[:, [0, 2]])
    _, rf_z = in_facing_frame(rf[:, [0, 2]] - root[:, [0, 2]])
    _, head_z = in_facing_frame(head[:, [0, 2]] - root[:, [0, 2]])
    _, vroot_z = in_facing_frame(seq.velocities[:, sk.root][:, [0, 2]])

    hands = np.linalg.norm(lw - rw, axis=-1)
    feet = np.linalg.norm(lf - rf, axis=-1)
    yaw_rate = np.abs(wrap_angle(np.diff(yaws, append=yaws[-1]))) * seq.fps

    rel = np.stack([
        lw[:, 1] > head[:, 1],                      # 0 left wrist above head
        rw[:, 1] > head[:, 1],                      # 1 right wrist above head
        lw[:, 1] > p[:, sk.left_shoulder, 1],       # 2 left wrist above shoulder
        rw[:, 1] > p[:, sk.right_shoulder, 1],      # 3 right wrist above shoulder
        hands < 0.3,                                # 4 hands together
        hands > 0.8,                                # 5 hands wide
        (lf_z - rf_z) > 0.05,                       # 6 left foot in front
        (rf_z - lf_z) > 0.05,                       # 7 right foot in front
        feet > 0.4,                                 # 8 feet apart
        root[:, 1] < 0.85,                          # 9 crouching
        lw_z > 0.2,                                 # 10 left wrist in front of torso
        rw_z > 0.2,                                 # 11 right wrist in front of torso
        vroot_z > 0.1,                              # 12 root moving forward
        vroot_z < -0.1,                             # 13 root moving backward
        yaw_rate > np.deg2rad(30.0),                # 14 turning
        (lw[:, 1] < root[:, 1]) & (rw[:, 1] < root[:, 1]),  # 15 arms down
    ], axis=1)
    return rel.mean(axis=0).astype(np.float64)


def crossdist_features(duet: DuetSequence, sk: Skeleton) -> np.ndarray:
    """(18,) mean and std over time of 9 leader-follower joint distances."""
    lp, fp = duet.leader.positions, duet.follower.positions
    if lp.shape[0] != fp.shape[0]:
        raise ValueError("leader/follower length mismatch")
    pairs = [
        (sk.root, sk.root),
        (sk.left_wrist, sk.left_wrist), (sk.left_wrist, sk.right_wrist),
        (sk.right_wrist, sk.left_wrist), (sk.right_wrist, sk.right_wrist),
        (sk.root, sk.left_wrist), (sk.root, sk.right_wrist),
        (sk.left_wrist, sk.root), (sk.right_wrist, sk.root),
    ]
    d = np.stack(
        [np.linalg.norm(lp[:, a] - fp[:, b], axis=-1) for a, b in pairs], axis=1
    )  # (T, 9)
    return np.concatenate([d.mean(axis=0), d.std(axis=0)])


# ---------------------------------------------------------------------------
# distribution metrics


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0."""
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _gaussian_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance; shrinks toward a scaled identity when n <= dim."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    if x.shape[0] < 2:
        return mu, np.zeros((x.shape[1], x.shape[1]))
    cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov)
    n, d = x.shape
    if n <= d:
        gamma = 0.1
        cov = (1.0 - gamma) * cov + gamma * (np.trace(cov) / d) * np.eye(d)
    return mu, cov


def fid(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the cross term is
    computed as tr sqrtm(sqrtm(S_a) S_b sqrtm(S_a)) so everything stays in
    symmetric eigendecompositions. Result is floored at 0.
    """
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be 2-D with equal dimensionality")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite feature values")
    mu_a, cov_a = _gaussian_stats(a)
    mu_b, cov_b = _gaussian_stats(b)
    sa = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(sa @ cov_b @ sa)
    val = float(
        np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross)
    )
    return max(val, 0.0)


def diversity(feature_set: np.ndarray, pairs: int = 32, seed: int = 0) -> float:
    """Mean distance over `pairs` random disjoint pairs (seeded permutations)."""
    x = np.asarray(feature_set, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    dists = []
    while len(dists) < pairs:
        perm = rng.permutation(x.shape[0])
        for i in range(0, x.shape[0] - 1, 2):
            dists.append(float(np.linalg.norm(x[perm[i]] - x[perm[i + 1]])))
            if len(dists) == pairs:
                break
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# rhythm


def motion_beats(seq: MotionSequence, smooth_window: int = 5) -> np.ndarray:
    """Beat times (s): strict local minima of smoothed mean joint speed."""
    if len(seq) < 3:
        raise ValueError("need at least 3 frames")
    speed = np.linalg.norm(seq.velocities, axis=-1).mean(axis=1)
    kernel = np.ones(smooth_window) / smooth_window
    lo = smooth_window // 2
    hi = smooth_window - 1 - lo
    padded = np.concatenate([np.repeat(speed[:1], lo), speed, np.repeat(speed[-1:], hi)])
    smoothed = np.convolve(padded, kernel, mode="valid")
    mins = np.nonzero(
        (smoothed[1:-1] < smoothed[:-2]) & (smoothed[1:-1] < smoothed[2:])
    )[0] + 1
    return mins / seq.fps


def _beat_kernel(reference: np.ndarray, candidate: np.ndarray, sigma_s: float) -> float:
    if len(reference) == 0:
        raise ValueError("reference beat set is empty")
    if len(candidate) == 0:
        return 0.0
    ref = np.asarray(reference, dtype=np.float64)[:, None]
    cand = np.asarray(candidate, dtype=np.float64)[None, :]
    nearest_sq = np.min((ref - cand) ** 2, axis=1)
    return float(np.mean(np.exp(-nearest_sq / (2.0 * sigma_s**2))))


def bas(motion_beat_times: np.ndarray, music_beat_times: np.ndarray, fps: float,
        sigma_frames: float = BEAT_SIGMA_FRAMES) -> float:
    """Motion-music alignment: mean Gaussian kernel from each music beat to
    its nearest motion beat; empty motion beats score 0."""
    return _beat_kernel(music_beat_times, motion_beat_times, sigma_frames / fps)


def bed(leader_beat_times: np.ndarray, follower_beat_times: np.ndarray, fps: float,
        sigma_frames: float = BEAT_SIGMA_FRAMES) -> float:
    """Leader-follower beat synchrony: same kernel with leader beats as reference."""
    return _beat_kernel(leader_beat_times, follower_beat_times, sigma_frames / fps)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    fid_k: float
    fid_g: float
    div_k: float
    div_g: float
    fid_cd: float
    div_cd: float
    bed: float
    bas: float
    sample_count: int
    config_hash: str = ""

    def validate(self) -> None:
        for name in ("fid_k", "fid_g", "fid_cd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("bed", "bas"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0 + 1e-12):
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def evaluate_sets(
    ref_k, ref_g, ref_cd, gen_k, gen_g, gen_cd,
    bed_values, bas_values, div_pairs: int, seed: int, config_hash: str = "",
) -> MetricReport:
    """Assemble a report from per-sequence feature matrices and rhythm scores."""
    report = MetricReport(
        fid_k=fid(ref_k, gen_k),
        fid_g=fid(ref_g, gen_g),
        div_k=diversity(gen_k, div_pairs, seed),
        div_g=diversity(gen_g, div_pairs, seed),
        fid_cd=fid(ref_cd, gen_cd),
        div_cd=diversity(gen_cd, div_pairs, seed),
        bed=float(np.mean(bed_values)),
        bas=float(np.mean(bas_values)),
        sample_count=int(np.asarray(gen_k).shape[0]),
        config_hash=config_hash,
    )
    report.validate()
    return report
