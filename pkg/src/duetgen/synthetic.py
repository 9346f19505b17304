"""Procedural beat-locked duet corpus.

Each sequence: a leader dances a 4-beat-bar move grammar (basic, side, turn,
travel) stepping on a per-sequence syncopation offset of the music grid; the
follower mirrors the leader's root path with a fixed lag and a target
relation offset (one of a few hold presets per sequence), plus bounded noise,
and marks every music beat with a sharp arm/head pulse. Feet are planted
between steps so ground contacts are real. Everything is a deterministic
function of the spec and the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import BeatTrack, DEFAULT_ACCENTS, synthesize_beat_track
from .geometry import wrap_angle, yaw_matrix
from .motion import DuetSequence, MotionSequence, Skeleton, compute_features, default_skeleton, relation_track

MOVES = ("basic", "side", "turn", "travel")


@dataclass(frozen=True)
class RelationPreset:
    name: str
    r_x: float
    r_z: float
    r_theta: float


DEFAULT_PRESETS = (
    RelationPreset("closed", 0.0, 1.0, 2.8),
    RelationPreset("open", 0.5, 1.15, 2.9),
    RelationPreset("shadow", 0.05, 0.85, 0.0),
    RelationPreset("side_by_side", 0.85, 0.25, 1.4),
)

STYLES = ("smooth", "sharp", "bouncy", "sway")

# articulation texture per style: (arm swing, torso sway, bounce) amplitudes
_STYLE_TEXTURE = {
    "smooth": (0.05, 0.02, 0.008),
    "sharp": (0.09, 0.015, 0.010),
    "bouncy": (0.06, 0.02, 0.028),
    "sway": (0.05, 0.06, 0.010),
}


def _uniform_transitions() -> np.ndarray:
    return np.full((4, 4), 0.25)


@dataclass
class SyntheticDuetSpec:
    bpm: float = 105.0
    bpm_jitter: float = 15.0  # per-sequence tempo draw: bpm +/- jitter
    duration: float = 60.0
    fps: float = 20.0
    move_transitions: np.ndarray = field(default_factory=_uniform_transitions)
    lag_frames: int = 2
    relation_presets: tuple[RelationPreset, ...] = DEFAULT_PRESETS
    noise_amplitude: float = 0.02
    styles: tuple[str, ...] = STYLES
    # leader steps shifted by these beat fractions (sampled per sequence);
    # the follower's pulse stays on the music grid
    syncopation: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75)
    accent_pattern: tuple[int, ...] = DEFAULT_ACCENTS
    seed: int = 0

    def validate(self) -> None:
        tm = np.asarray(self.move_transitions)
        if tm.shape != (4, 4) or np.any(tm < 0) or not np.allclose(tm.sum(axis=1), 1.0):
            raise ValueError("move_transitions must be 4x4 row-stochastic")
        if self.bpm - self.bpm_jitter <= 0:
            raise ValueError("bpm jitter exceeds base tempo")


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _leader_root_path(
    times: np.ndarray, bar_starts: np.ndarray, moves: list[str], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise move curves -> root XZ (T, 2) and yaw (T,)."""
    t_end = times[-1] + 1e-9
    xz = np.zeros((len(times), 2))
    yaw = np.zeros(len(times))
    pos = np.zeros(2)
    heading = 0.0
    basic_dir, side_dir = 1.0, 1.0
    turn_dirs = rng.choice([-1.0, 1.0], size=len(moves))

    for b, move in enumerate(moves):
        t0 = bar_starts[b]
        t1 = bar_starts[b + 1] if b + 1 < len(bar_starts) else t_end
        sel = (times >= t0) & (times < t1)
        if not np.any(sel):
            continue
        u = _smoothstep((times[sel] - t0) / max(t1 - t0, 1e-9))
        c, s = np.cos(heading), np.sin(heading)
        dx_l = np.zeros_like(u)
        dz_l = np.zeros_like(u)
        yaw_here = np.full_like(u, heading)
        if move == "basic":
            dz_l = basic_dir * 0.28 * u
        elif move == "side":
            dx_l = side_dir * 0.30 * u
        elif move == "turn":
            yaw_here = heading + turn_dirs[b] * (np.pi / 2.0) * u
        elif move == "travel":
            dz_l = 0.65 * u
        # local (x left, z forward) -> world
        xz[sel, 0] = pos[0] + c * dx_l + s * dz_l
        xz[sel, 1] = pos[1] - s * dx_l + c * dz_l
        yaw[sel] = yaw_here
        # advance the bar-end state
        if move == "basic":
            pos = pos + np.array([s, c]) * (basic_dir * 0.28)
            basic_dir = -basic_dir
        elif move == "side":
            pos = pos + np.array([c, -s]) * (side_dir * 0.30)
            side_dir = -side_dir
        elif move == "turn":
            heading = float(wrap_angle(heading + turn_dirs[b] * np.pi / 2.0))
        elif move == "travel":
            pos = pos + np.array([s, c]) * 0.65
    # before the first bar: hold the initial pose
    pre = times < bar_starts[0]
    xz[pre] = 0.0
    yaw[pre] = 0.0
    return xz, yaw


def _sample_moves(n_bars: int, transitions: np.ndarray, rng: np.random.Generator) -> list[str]:
    moves = []
    state = int(rng.integers(0, 4))
    for _ in range(n_bars):
        moves.append(MOVES[state])
        state = int(rng.choice(4, p=transitions[state]))
    return moves


def _pulse_profile(times: np.ndarray, onsets: np.ndarray, accents: np.ndarray,
                   period: float, amp: float) -> np.ndarray:
    """Dip peaking exactly on each onset; zero value and velocity at the edges."""
    out = np.zeros_like(times)
    width = 0.45 * period
    for onset, accent in zip(onsets, accents):
        sel = np.abs(times - onset) < width
        if not np.any(sel):
            continue
        u = (times[sel] - onset) / width
        out[sel] -= amp * (0.75 + 0.25 * accent / 3.0) * np.cos(np.pi * u / 2.0) ** 2
    return out


def _planted_feet(
    times: np.ndarray,
    root_xz: np.ndarray,
    yaw: np.ndarray,
    step_times: np.ndarray,
    lift: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Alternating step machine: the active foot travels to its next anchor
    with a lift while the other stays planted. Returns ankle positions (T, 2, 3)
    for (left, right) and toe positions likewise."""
    t_count = len(times)
    ankles = np.zeros((t_count, 2, 3))
    toes = np.zeros((t_count, 2, 3))
    hip_local = np.array([[0.11, 0.0], [-0.11, 0.0]])  # (x left, z fwd) per foot
    ankle_y, toe_y = 0.08, 0.02

    def anchor(foot: int, t: float) -> np.ndarray:
        i = min(np.searchsorted(times, t), t_count - 1)
        c, s = np.cos(yaw[i]), np.sin(yaw[i])
        lx, lz = hip_local[foot]
        return root_xz[i] + np.array([c * lx + s * lz, -s * lx + c * lz])

    anchors = [anchor(0, times[0]), anchor(1, times[0])]
    boundaries = [t for t in step_times if times[0] < t <= times[-1] + 1e-9]
    segments = [(times[0] - 1.0, boundaries[0] if boundaries else times[-1] + 1.0, None)]
    for k in range(len(boundaries)):
        seg_end = boundaries[k + 1] if k + 1 < len(boundaries) else times[-1] + 1.0
        segments.append((boundaries[k], seg_end, k % 2))

    for seg_start, seg_end, active in segments:
        sel = (times >= seg_start) & (times < seg_end)
        if not np.any(sel):
            if active is not None:
                anchors[active] = anchor(active, min(seg_end, times[-1]))
            continue
        for foot in (0, 1):
            if foot != active:
                ankles[sel, foot, 0] = anchors[foot][0]
                ankles[sel, foot, 2] = anchors[foot][1]
                ankles[sel, foot, 1] = ankle_y
        if active is not None:
            new_anchor = anchor(active, min(seg_end, times[-1]))
            u = _smoothstep((times[sel] - seg_start) / max(seg_end - seg_start, 1e-9))
            path = anchors[active][None] + (new_anchor - anchors[active])[None] * u[:, None]
            ankles[sel, active, 0] = path[:, 0]
            ankles[sel, active, 2] = path[:, 1]
            ankles[sel, active, 1] = ankle_y + lift * np.sin(np.pi * u) ** 2
            anchors[active] = new_anchor
    # toes sit ahead of the ankles along the facing direction
    c, s = np.cos(yaw), np.sin(yaw)
    fwd = np.stack([s, np.zeros_like(s), c], axis=1)
    for foot in (0, 1):
        toes[:, foot] = ankles[:, foot] + 0.12 * fwd
        toes[:, foot, 1] = np.maximum(ankles[:, foot, 1] - (ankle_y - toe_y), toe_y * 0.5)
    return ankles, toes


def _animate_person(
    times: np.ndarray,
    root_xz: np.ndarray,
    yaw: np.ndarray,
    sk: Skeleton,
    step_times: np.ndarray,
    style: str,
    period: float,
    pulse: np.ndarray | None = None,
    phase_offset: float = 0.0,
) -> np.ndarray:
    """Positions (T, N, 3) for one dancer given its root path and step grid.

    Periodic texture (bounce, sway, arm swing) runs on the dancer's own step
    grid (times - phase_offset), so a syncopated leader carries no texture at
    the music phase itself.
    """
    arm_amp, sway_amp, bounce_amp = _STYLE_TEXTURE[style]
    t_count = len(times)
    tt = times - phase_offset
    p = np.zeros((t_count, sk.joint_count, 3))
    c, s = np.cos(yaw), np.sin(yaw)

    def local(dx, dy, dz):
        """body-local (x left, y up, z forward) -> world offset"""
        return np.stack([c * dx + s * dz, dy if np.ndim(dy) else np.full(t_count, dy), -s * dx + c * dz], axis=1)

    bounce = bounce_amp * np.cos(2.0 * np.pi * tt / period)
    pelvis_y = 0.95 + bounce
    root = np.stack([root_xz[:, 0], pelvis_y, root_xz[:, 1]], axis=1)
    p[:, sk.root] = root

    zero = np.zeros(t_count)
    sway = sway_amp * np.cos(2.0 * np.pi * tt / (4.0 * period))
    pulse_y = pulse if pulse is not None else zero

    p[:, sk.left_hip] = root + local(0.09 * np.ones(t_count), -0.05, zero)
    p[:, sk.right_hip] = root + local(-0.09 * np.ones(t_count), -0.05, zero)
    p[:, 3] = root + local(zero, 0.12, zero)  # spine1
    p[:, 6] = root + local(sway * 0.4, 0.26, zero)  # spine2
    p[:, 9] = root + local(sway * 0.8, 0.40, zero)  # spine3
    p[:, 9, 1] += pulse_y * 0.3
    p[:, 12] = root + local(sway, 0.50, zero)  # neck
    p[:, 12, 1] += pulse_y * 0.4
    p[:, sk.head] = root + local(sway, 0.62, zero)
    p[:, sk.head, 1] += pulse_y * 0.6

    p[:, 13] = p[:, 9] + local(0.06 * np.ones(t_count), 0.06, zero)  # collars
    p[:, 14] = p[:, 9] + local(-0.06 * np.ones(t_count), 0.06, zero)
    p[:, sk.left_shoulder] = p[:, 9] + local(0.18 * np.ones(t_count), 0.06, zero)
    p[:, sk.right_shoulder] = p[:, 9] + local(-0.18 * np.ones(t_count), 0.06, zero)

    swing_l = arm_amp * np.cos(2.0 * np.pi * tt / (2.0 * period))
    swing_r = arm_amp * np.cos(2.0 * np.pi * tt / (2.0 * period) + np.pi)
    p[:, 18] = p[:, sk.left_shoulder] + local(0.05 * np.ones(t_count), -0.22, 0.10 + swing_l)
    p[:, 19] = p[:, sk.right_shoulder] + local(-0.05 * np.ones(t_count), -0.22, 0.10 + swing_r)
    p[:, 18, 1] += pulse_y * 0.5
    p[:, 19, 1] += pulse_y * 0.5
    p[:, sk.left_wrist] = p[:, 18] + local(0.02 * np.ones(t_count), -0.05, 0.20 + swing_l * 0.5)
    p[:, sk.right_wrist] = p[:, 19] + local(-0.02 * np.ones(t_count), -0.05, 0.20 + swing_r * 0.5)
    p[:, sk.left_wrist, 1] += pulse_y
    p[:, sk.right_wrist, 1] += pulse_y

    ankles, toes = _planted_feet(times, root_xz, yaw, step_times, lift=0.07)
    p[:, sk.left_heel] = ankles[:, 0]
    p[:, sk.right_heel] = ankles[:, 1]
    p[:, sk.left_toe] = toes[:, 0]
    p[:, sk.right_toe] = toes[:, 1]
    hips = np.stack([p[:, sk.left_hip], p[:, sk.right_hip]], axis=1)
    for foot, hip in ((0, 0), (1, 1)):
        knee = 0.55 * hips[:, hip] + 0.45 * ankles[:, foot]
        knee += 0.07 * np.stack([s, zero, c], axis=1)  # slight forward bow
        p[:, 4 if foot == 0 else 5] = knee
    return p


def _ou_noise(t_count: int, amp: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth bounded 2-D noise (AR(1) walk clipped to +/- 2 amp)."""
    if amp <= 0:
        return np.zeros((t_count, 2))
    out = np.zeros((t_count, 2))
    state = np.zeros(2)
    for i in range(t_count):
        state = 0.95 * state + 0.25 * amp * rng.standard_normal(2)
        out[i] = state
    return np.clip(out, -2.0 * amp, 2.0 * amp)


def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x.copy()
    pad_lo = window // 2
    pad_hi = window - 1 - pad_lo
    xp = np.concatenate([np.repeat(x[:1], pad_lo, axis=0), x, np.repeat(x[-1:], pad_hi, axis=0)])
    kernel = np.ones(window) / window
    if x.ndim == 1:
        return np.convolve(xp, kernel, mode="valid")
    return np.stack([np.convolve(xp[:, j], kernel, mode="valid") for j in range(x.shape[1])], axis=1)


def generate_synthetic_duet(
    spec: SyntheticDuetSpec, rng: np.random.Generator, seq_id: str = "seq"
) -> tuple[DuetSequence, BeatTrack]:
    """One deterministic duet + beat track from the spec and the given rng."""
    spec.validate()
    sk = default_skeleton()
    bpm = spec.bpm + rng.uniform(-spec.bpm_jitter, spec.bpm_jitter)
    beat = synthesize_beat_track(bpm, spec.duration, spec.accent_pattern)
    period = 60.0 / bpm
    preset = spec.relation_presets[int(rng.integers(0, len(spec.relation_presets)))]
    style = spec.styles[int(rng.integers(0, len(spec.styles)))]
    sync = spec.syncopation[int(rng.integers(0, len(spec.syncopation)))] * period

    t_count = int(round(spec.duration * spec.fps))
    times = np.arange(t_count) / spec.fps

    leader_steps = beat.onsets + sync
    bar_len = 4.0 * period
    bar_starts = np.arange(sync, spec.duration - bar_len * 0.5, bar_len)
    moves = _sample_moves(len(bar_starts), np.asarray(spec.move_transitions), rng)

    l_xz, l_yaw = _leader_root_path(times, bar_starts, moves, rng)
    leader_pos = _animate_person(
        times, l_xz, l_yaw, sk, leader_steps, style, period, phase_offset=sync
    )

    # follower root: lagged + smoothed mirror of the leader, held at the preset
    lag = spec.lag_frames
    idx = np.maximum(np.arange(t_count) - lag, 0)
    win = 2 * lag + 1
    base_xz = _moving_average(l_xz[idx], win)
    base_yaw_cs = _moving_average(np.stack([np.cos(l_yaw[idx]), np.sin(l_yaw[idx])], axis=1), win)
    base_yaw = np.arctan2(base_yaw_cs[:, 1], base_yaw_cs[:, 0])
    c, s = np.cos(base_yaw), np.sin(base_yaw)
    f_xz = np.stack([
        base_xz[:, 0] + c * preset.r_x + s * preset.r_z,
        base_xz[:, 1] - s * preset.r_x + c * preset.r_z,
    ], axis=1)
    f_xz = f_xz + _ou_noise(t_count, spec.noise_amplitude, rng)
    f_yaw = wrap_angle(base_yaw + preset.r_theta)

    pulse = _pulse_profile(times, beat.onsets, beat.accents, period, amp=0.26)
    follower_pos = _animate_person(
        times, f_xz, f_yaw, sk, beat.onsets, style, period, pulse=pulse
    )

    leader = compute_features(leader_pos, sk, spec.fps)
    follower = compute_features(follower_pos, sk, spec.fps)
    duet = DuetSequence(
        fps=spec.fps,
        leader=leader,
        follower=follower,
        relation=relation_track(leader, follower),
        style=f"{style}",
        beat_times=beat.onsets.copy(),
        seq_id=seq_id,
    )
    return duet, beat


def generate_corpus(
    spec: SyntheticDuetSpec, count: int, seed: int | None = None
) -> list[tuple[DuetSequence, BeatTrack]]:
    """`count` independent duets; fully determined by (spec, seed)."""
    root_seed = spec.seed if seed is None else seed
    children = np.random.SeedSequence(root_seed).spawn(count)
    out = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        out.append(generate_synthetic_duet(spec, rng, seq_id=f"seq{i:03d}"))
    return out
