"""Gaze direction conventions: (pitch, yaw) in radians <-> unit 3-vectors.

The camera looks down -z, so (0, 0) maps to (0, 0, -1). Positive pitch
turns the gaze toward -y and positive yaw toward -x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError

SAMPLING_RANGE = math.pi / 3


def pitchyaw_to_vec(pitch: float, yaw: float) -> np.ndarray:
    cp = math.cos(pitch)
    return np.array([-cp * math.sin(yaw), -math.sin(pitch), -cp * math.cos(yaw)])


def vec_to_pitchyaw(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if not n > 0.0:
        raise ContractError("vec_to_pitchyaw: zero vector has no direction")
    x, y, z = v / n
    pitch = math.asin(max(-1.0, min(1.0, -y)))
    if math.hypot(x, z) < 1e-12:
        return pitch, 0.0
    yaw = math.atan2(-x, -z)
    if yaw == -math.pi:
        yaw = math.pi
    return pitch, yaw


def pitchyaw_array_to_vecs(py: np.ndarray) -> np.ndarray:
    py = np.asarray(py, dtype=np.float64)
    p, y = py[..., 0], py[..., 1]
    return np.stack([-np.cos(p) * np.sin(y), -np.sin(p), -np.cos(p) * np.cos(y)], axis=-1)


def tensor_vec_to_pitchyaw(v: ad.Tensor) -> ad.Tensor:
    """Differentiable inverse for a batch of unit vectors of shape (B, 3)."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    pitch = ad.asin(-y)
    yaw = ad.atan2(-x, -z)
    return ad.concat([pitch.reshape(-1, 1), yaw.reshape(-1, 1)], axis=1)


@dataclass(frozen=True)
class GazeLabel:
    """Gaze direction as (pitch, yaw) radians."""

    pitch: float
    yaw: float

    def __post_init__(self):
        if not (-math.pi / 2 <= self.pitch <= math.pi / 2):
            raise ContractError(f"pitch {self.pitch} outside [-pi/2, pi/2]")
        if not (-math.pi < self.yaw <= math.pi):
            raise ContractError(f"yaw {self.yaw} outside (-pi, pi]")

    @property
    def vec(self) -> np.ndarray:
        return pitchyaw_to_vec(self.pitch, self.yaw)

    @classmethod
    def from_vec(cls, v) -> "GazeLabel":
        return cls(*vec_to_pitchyaw(v))


Q = math.pi / 4
TARGETS = {
    "Q1": GazeLabel(Q, Q),
    "Q2": GazeLabel(-Q, Q),
    "Q3": GazeLabel(-Q, -Q),
    "Q4": GazeLabel(Q, -Q),
}
