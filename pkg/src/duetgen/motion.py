"""Two-person motion representation: skeleton, per-frame features, pairwise
relation, fixed-length windows, and invertible canonicalization.

Per-frame state of one dancer (flat feature order, N joints):
  [0      : 3N ) global joint positions, world frame (m)
  [3N     : 6N ) global joint velocities (m/s), frame 0 copies frame 1
  [6N     : 12N) local joint rotations, 6D; row 0 is the root's world
                 rotation, other rows are parent-relative
  [12N    : 12N+4) foot contacts: left heel, left toe, right heel, right toe

A window of tau frames is canonicalized so its first frame has root XZ at
the origin and yaw 0; the transform that undoes this is stored with the
window. Relation windows are never canonicalized: (r_x, r_z, r_theta) is
already expressed in the leader's ground-plane frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    RigidTransform2D,
    identity_rot6d,
    rot6d_to_matrix,
    wrap_angle,
    yaw_from_root_rotation,
    yaw_matrix,
)

DEFAULT_FPS = 20.0
WINDOW_LEN = 20  # tau: 1 s at 20 fps
CONTACT_SPEED_THRESHOLD = 0.05  # m/s, strict: speed < v_c => contact


@dataclass(frozen=True)
class Skeleton:
    """Joint tree with rest offsets and the named indices the pipeline needs."""

    joint_names: tuple[str, ...]
    parents: tuple[int, ...]  # parent index per joint, -1 for root
    rest_offsets: np.ndarray  # (N, 3) parent-to-joint offsets, meters
    root: int = 0
    left_heel: int = 7
    left_toe: int = 10
    right_heel: int = 8
    right_toe: int = 11
    left_shoulder: int = 16
    right_shoulder: int = 17
    left_wrist: int = 20
    right_wrist: int = 21
    head: int = 15
    left_hip: int = 1
    right_hip: int = 2

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def validate(self) -> None:
        n = self.joint_count
        if len(self.parents) != n or self.rest_offsets.shape != (n, 3):
            raise ValueError("skeleton arrays inconsistent with joint count")
        if not np.all(np.isfinite(self.rest_offsets)):
            raise ValueError("non-finite rest offsets")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [self.root]:
            raise ValueError("parent array must form a tree rooted at root")
        seen = set(roots)
        for j, p in enumerate(self.parents):
            if j == self.root:
                continue
            if not (0 <= p < n) or p == j:
                raise ValueError(f"bad parent {p} for joint {j}")
            if p >= j:
                raise ValueError("parents must precede children")
            seen.add(j)
        for idx in (
            self.root, self.left_heel, self.left_toe, self.right_heel,
            self.right_toe, self.left_shoulder, self.right_shoulder,
            self.left_wrist, self.right_wrist, self.head,
            self.left_hip, self.right_hip,
        ):
            if not (0 <= idx < n):
                raise ValueError(f"named joint index {idx} out of range")


_JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)

_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# rough human proportions, meters, T-pose facing +Z (left side = +X)
_REST_OFFSETS = np.array([
    [0.00, 0.95, 0.00],    # pelvis (offset from ground origin)
    [0.09, -0.05, 0.00],   # left_hip
    [-0.09, -0.05, 0.00],  # right_hip
    [0.00, 0.12, 0.00],    # spine1
    [0.00, -0.40, 0.00],   # left_knee
    [0.00, -0.40, 0.00],   # right_knee
    [0.00, 0.14, 0.00],    # spine2
    [0.00, -0.42, 0.00],   # left_ankle
    [0.00, -0.42, 0.00],   # right_ankle
    [0.00, 0.14, 0.00],    # spine3
    [0.00, -0.06, 0.12],   # left_foot (toe)
    [0.00, -0.06, 0.12],   # right_foot (toe)
    [0.00, 0.10, 0.00],    # neck
    [0.06, 0.06, 0.00],    # left_collar
    [-0.06, 0.06, 0.00],   # right_collar
    [0.00, 0.12, 0.00],    # head
    [0.12, 0.00, 0.00],    # left_shoulder
    [-0.12, 0.00, 0.00],   # right_shoulder
    [0.26, 0.00, 0.00],    # left_elbow
    [-0.26, 0.00, 0.00],   # right_elbow
    [0.25, 0.00, 0.00],    # left_wrist
    [-0.25, 0.00, 0.00],   # right_wrist
])


def default_skeleton() -> Skeleton:
    """22-joint SMPL-style skeleton used by the synthetic corpus."""
    sk = Skeleton(_JOINT_NAMES, _PARENTS, _REST_OFFSETS.copy())
    sk.validate()
    return sk


def feature_dim(n_joints: int) -> int:
    return 12 * n_joints + 4


@dataclass(frozen=True)
class MotionFrame:
    """One dancer, one frame. Arrays: positions/velocities (N, 3), rotations (N, 6)."""

    positions: np.ndarray
    velocities: np.ndarray
    rotations: np.ndarray
    contacts: np.ndarray  # (4,) in {0, 1}


@dataclass(frozen=True)
class RelationFrame:
    """Follower root expressed in the leader's ground-plane frame."""

    r_x: float
    r_z: float
    r_theta: float  # wrapped into [-pi, pi]


@dataclass
class MotionSequence:
    """Array-of-frames container; `frame(i)` gives the MotionFrame view."""

    fps: float
    positions: np.ndarray  # (T, N, 3)
    velocities: np.ndarray  # (T, N, 3)
    rotations: np.ndarray  # (T, N, 6)
    contacts: np.ndarray  # (T, 4)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_joints(self) -> int:
        return self.positions.shape[1]

    def frame(self, i: int) -> MotionFrame:
        return MotionFrame(
            self.positions[i], self.velocities[i], self.rotations[i], self.contacts[i]
        )

    def features(self) -> np.ndarray:
        """Flat per-frame features, shape (T, 12N + 4)."""
        t, n = self.positions.shape[:2]
        return np.concatenate(
            [
                self.positions.reshape(t, 3 * n),
                self.velocities.reshape(t, 3 * n),
                self.rotations.reshape(t, 6 * n),
                self.contacts.reshape(t, 4),
            ],
            axis=1,
        )

    def root_yaws(self) -> np.ndarray:
        """Per-frame yaw of the root rotation; degenerate frames reuse the
        previous frame's yaw (frame 0 falls back to 0)."""
        mats = rot6d_to_matrix(self.rotations[:, 0])  # (T, 3, 3)
        fwd = mats @ np.array([0.0, 0.0, 1.0])
        planar = fwd[:, 0] ** 2 + fwd[:, 2] ** 2
        yaws = np.arctan2(fwd[:, 0], fwd[:, 2])
        degenerate = planar < 1e-16
        if np.any(degenerate):
            prev = 0.0
            for i in range(len(self)):
                if degenerate[i]:
                    yaws[i] = prev
                else:
                    prev = yaws[i]
        return yaws

    def transformed(self, tf: RigidTransform2D) -> "MotionSequence":
        """Apply a ground-plane rigid transform to the whole sequence."""
        pos = tf.apply_points(self.positions)
        vel = tf.apply_vectors(self.velocities)
        rot = self.rotations.copy().astype(np.float64)
        root_mats = rot6d_to_matrix(self.rotations[:, 0])
        new_root = np.einsum("ij,tjk->tik", tf.matrix(), root_mats)
        rot[:, 0, 0:3] = new_root[:, :, 0]
        rot[:, 0, 3:6] = new_root[:, :, 1]
        return MotionSequence(self.fps, pos, vel, rot, self.contacts.copy())

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(
            self.fps,
            self.positions[start:stop].copy(),
            self.velocities[start:stop].copy(),
            self.rotations[start:stop].copy(),
            self.contacts[start:stop].copy(),
        )


def sequence_from_features(feats: np.ndarray, n_joints: int, fps: float) -> MotionSequence:
    """Inverse of MotionSequence.features()."""
    feats = np.asarray(feats, dtype=np.float64)
    t = feats.shape[0]
    if feats.shape[1] != feature_dim(n_joints):
        raise ValueError(
            f"feature dim {feats.shape[1]} != {feature_dim(n_joints)} for {n_joints} joints"
        )
    n = n_joints
    return MotionSequence(
        fps,
        feats[:, 0 : 3 * n].reshape(t, n, 3),
        feats[:, 3 * n : 6 * n].reshape(t, n, 3),
        feats[:, 6 * n : 12 * n].reshape(t, n, 6),
        feats[:, 12 * n : 12 * n + 4],
    )


def velocities_from_positions(positions: np.ndarray, fps: float) -> np.ndarray:
    """Finite-difference velocities; frame 0 copies frame 1 (T >= 2)."""
    vel = np.diff(positions, axis=0) * fps
    return np.concatenate([vel[:1], vel], axis=0)


def foot_contacts(
    heel_toe_positions: np.ndarray, fps: float, threshold: float = CONTACT_SPEED_THRESHOLD
) -> np.ndarray:
    """Binary contacts from heel/toe speeds: contact iff speed < threshold (strict).

    heel_toe_positions: (T, 4, 3) ordered left heel, left toe, right heel,
    right toe. Returns (T, 4) float 0/1; frame 0 copies frame 1's speeds.
    """
    p = np.asarray(heel_toe_positions, dtype=np.float64)
    if p.shape[0] < 2:
        raise ValueError("need at least 2 frames for contact speeds")
    speeds = np.linalg.norm(velocities_from_positions(p, fps), axis=-1)
    return (speeds < threshold).astype(np.float64)


def _root_yaw_from_hips(positions: np.ndarray, skeleton: Skeleton, prev: float) -> float:
    """Facing direction from the hip lateral axis; degenerate -> prev yaw."""
    lateral = positions[skeleton.left_hip] - positions[skeleton.right_hip]
    fwd = np.cross(lateral, np.array([0.0, 1.0, 0.0]))
    fx, fz = fwd[0], fwd[2]
    if fx * fx + fz * fz < 1e-16:
        return prev
    return float(np.arctan2(fx, fz))


def compute_features(
    raw_positions: np.ndarray, skeleton: Skeleton, fps: float
) -> MotionSequence:
    """Full per-frame state from raw joint positions (T, N, 3).

    Velocities are finite differences (frame 0 copies frame 1). The root
    rotation is the yaw implied by the hip lateral axis; other joints carry
    identity rotations (recovering true limb rotations from positions would
    need IK, which is out of scope). Contacts come from heel/toe speeds.
    """
    p = np.asarray(raw_positions, dtype=np.float64)
    if p.ndim != 3 or p.shape[1] != skeleton.joint_count or p.shape[2] != 3:
        raise ValueError(f"expected (T, {skeleton.joint_count}, 3), got {p.shape}")
    if p.shape[0] < 2:
        raise ValueError("need T >= 2 frames")
    bad = np.nonzero(~np.isfinite(p).all(axis=(1, 2)))[0]
    if bad.size:
        raise ValueError(f"non-finite positions at frame {int(bad[0])}")

    t, n = p.shape[:2]
    vel = velocities_from_positions(p, fps)

    rot = np.tile(identity_rot6d(), (t, n, 1))
    prev = 0.0
    for i in range(t):
        prev = _root_yaw_from_hips(p[i], skeleton, prev)
        m = yaw_matrix(prev)
        rot[i, 0, 0:3] = m[:, 0]
        rot[i, 0, 3:6] = m[:, 1]

    heel_toe = p[:, [skeleton.left_heel, skeleton.left_toe, skeleton.right_heel, skeleton.right_toe]]
    contacts = foot_contacts(heel_toe, fps)
    return MotionSequence(fps, p, vel, rot, contacts)


def relation_from_poses(
    leader_xz: np.ndarray, leader_yaw: float, follower_xz: np.ndarray, follower_yaw: float
) -> RelationFrame:
    """Follower root offset and relative yaw in the leader's ground frame."""
    dx = follower_xz[0] - leader_xz[0]
    dz = follower_xz[1] - leader_xz[1]
    c, s = np.cos(leader_yaw), np.sin(leader_yaw)
    # rotate the world offset by -leader_yaw
    r_x = c * dx - s * dz
    r_z = s * dx + c * dz
    return RelationFrame(float(r_x), float(r_z), float(wrap_angle(follower_yaw - leader_yaw)))


def relation_world_pose(
    leader_xz: np.ndarray, leader_yaw: float, rel: RelationFrame
) -> tuple[np.ndarray, float]:
    """Inverse of relation_from_poses: follower world (xz, yaw) from a relation."""
    c, s = np.cos(leader_yaw), np.sin(leader_yaw)
    dx = c * rel.r_x + s * rel.r_z
    dz = -s * rel.r_x + c * rel.r_z
    xz = np.array([leader_xz[0] + dx, leader_xz[1] + dz])
    return xz, float(wrap_angle(leader_yaw + rel.r_theta))


def relation_track(leader: MotionSequence, follower: MotionSequence) -> np.ndarray:
    """Per-frame (r_x, r_z, r_theta), shape (T, 3)."""
    if len(leader) != len(follower):
        raise ValueError("leader/follower length mismatch")
    ly = leader.root_yaws()
    fy = follower.root_yaws()
    d = follower.positions[:, 0, [0, 2]] - leader.positions[:, 0, [0, 2]]
    c, s = np.cos(ly), np.sin(ly)
    return np.stack(
        [c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1], wrap_angle(fy - ly)], axis=1
    )


@dataclass
class DuetSequence:
    """Synchronized leader/follower tracks plus their relation track."""

    fps: float
    leader: MotionSequence
    follower: MotionSequence
    relation: np.ndarray  # (T, 3)
    style: str | None = None
    beat_times: np.ndarray | None = None  # seconds
    seq_id: str = ""

    def __len__(self) -> int:
        return len(self.leader)

    def validate(self, tol: float = 1e-6) -> None:
        t = len(self.leader)
        if len(self.follower) != t or self.relation.shape != (t, 3):
            raise ValueError("track lengths differ")
        recomputed = relation_track(self.leader, self.follower)
        err = np.abs(recomputed - self.relation)
        err[:, 2] = np.abs(wrap_angle(err[:, 2]))
        if err.max() > tol:
            raise ValueError(f"stored relation deviates from recomputed by {err.max():.2e}")


@dataclass
class MotionWindow:
    """tau canonicalized frames plus the transform back to world coordinates."""

    frames: MotionSequence
    to_world: RigidTransform2D
    start: int = 0

    def __len__(self) -> int:
        return len(self.frames)


def canonicalize_window(frames: MotionSequence, start: int = 0) -> MotionWindow:
    """Rigidly move a window so its first frame sits at the XZ origin facing +Z.

    The stored transform maps canonical coordinates back to world. Yaw of the
    first frame comes from its root rotation; if that is degenerate (vertical
    forward axis) the first frame uses yaw 0.
    """
    if len(frames) < 1:
        raise ValueError("empty window")
    root = frames.positions[0, 0]
    yaw0 = yaw_from_root_rotation(rot6d_to_matrix(frames.rotations[0, 0]), fallback=0.0)
    to_world = RigidTransform2D(float(root[0]), float(root[2]), yaw0)
    canonical = frames.transformed(to_world.inverse())
    return MotionWindow(canonical, to_world, start)


def invert_canonicalization(window: MotionWindow) -> MotionSequence:
    """World-frame frames of a canonicalized window."""
    return window.frames.transformed(window.to_world)


def windowize(
    duet: DuetSequence, tau: int = WINDOW_LEN, stride: int | None = None
) -> list[tuple[MotionWindow, MotionWindow, np.ndarray]]:
    """Split a duet into (leader window, follower window, relation window) triples.

    Motion windows are canonicalized per person; relation windows are copied
    as-is. Trailing frames that do not fill a window are dropped; returns []
    when the sequence is shorter than tau.
    """
    stride = tau if stride is None else stride
    out = []
    t = len(duet)
    for start in range(0, t - tau + 1, stride):
        lw = canonicalize_window(duet.leader.slice(start, start + tau), start)
        fw = canonicalize_window(duet.follower.slice(start, start + tau), start)
        rw = duet.relation[start : start + tau].copy()
        out.append((lw, fw, rw))
    return out


def window_features(frames: MotionSequence) -> np.ndarray:
    """Flat (tau, D) features of a window's frames."""
    return frames.features()


def window_from_features(
    feats: np.ndarray, to_world: RigidTransform2D, n_joints: int, fps: float, start: int = 0
) -> MotionWindow:
    seq = sequence_from_features(feats, n_joints, fps)
    return MotionWindow(seq, to_world, start)
