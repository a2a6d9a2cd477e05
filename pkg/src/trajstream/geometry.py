"""Planar rigid-body (SE(2)) poses and transforms.

Every frame in this package is a pose (x, y, yaw) mapping local coordinates
to parent coordinates: p_parent = R(yaw) @ p_local + (x, y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.yaw)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.yaw})")
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    @staticmethod
    def identity() -> "Pose2D":
        return Pose2D(0.0, 0.0, 0.0)

    def compose(self, other: "Pose2D") -> "Pose2D":
        """self ∘ other: the pose of `other` re-rooted through `self`."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.yaw)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        """Map local-frame points [..., 2] into the parent frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return np.asarray(pts) @ rot.T + np.array([self.x, self.y])

    def rotate_vectors(self, vecs: np.ndarray) -> np.ndarray:
        """Rotate local-frame vectors [..., 2] into the parent frame (no translation)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return np.asarray(vecs) @ rot.T

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])


def compose_pose_array(frame: Pose2D, poses: np.ndarray) -> np.ndarray:
    """Re-root an [N, 3] array of (x, y, yaw) poses through `frame`."""
    poses = np.asarray(poses, dtype=float)
    c, s = math.cos(frame.yaw), math.sin(frame.yaw)
    out = np.empty_like(poses)
    out[:, 0] = frame.x + c * poses[:, 0] - s * poses[:, 1]
    out[:, 1] = frame.y + s * poses[:, 0] + c * poses[:, 1]
    out[:, 2] = wrap_angle(frame.yaw + poses[:, 2])
    return out
