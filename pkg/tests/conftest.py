from __future__ import annotations

import numpy as np
import pytest
import torch

from duetgen.motion import MotionSequence, default_skeleton, velocities_from_positions
from duetgen.geometry import identity_rot6d, matrix_to_rot6d, yaw_matrix

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


def make_sequence(positions: np.ndarray, fps: float = 20.0, yaws: np.ndarray | None = None) -> MotionSequence:
    """MotionSequence from raw positions; root rotation from explicit yaws."""
    t, n = positions.shape[:2]
    vel = velocities_from_positions(positions, fps)
    rot = np.tile(identity_rot6d(), (t, n, 1))
    if yaws is not None:
        for i in range(t):
            rot[i, 0] = matrix_to_rot6d(yaw_matrix(yaws[i]))
    contacts = np.zeros((t, 4))
    return MotionSequence(fps, positions, vel, rot, contacts)
