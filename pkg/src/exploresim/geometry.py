"""Planar rigid-body poses and SE(2) helpers.

All headings live in (-pi, pi]. Compositions treat a pose triple
(x, y, theta) interchangeably as a frame and as a relative transform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Pose2:
    """Planar pose (meters, meters, radians), heading wrapped to (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @staticmethod
    def from_array(v) -> "Pose2":
        return Pose2(float(v[0]), float(v[1]), float(v[2]))

    def compose(self, delta: "Pose2") -> "Pose2":
        """Apply a body-frame transform: self followed by delta."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * delta.x - s * delta.y,
            self.y + s * delta.x + c * delta.y,
            self.theta + delta.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def relative_to(self, other: "Pose2") -> "Pose2":
        """Express self in other's frame: other^-1 o self."""
        return other.inverse().compose(self)

    def transform_point(self, px: float, py: float) -> tuple[float, float]:
        """Map a body-frame point into the world frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.x + c * px - s * py, self.y + s * px + c * py

    def inverse_transform_point(self, px: float, py: float) -> tuple[float, float]:
        """Map a world-frame point into the body frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = px - self.x, py - self.y
        return c * dx + s * dy, -s * dx + c * dy

    def distance_to(self, other: "Pose2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def compose_jacobian(pose: Pose2, delta: Pose2) -> np.ndarray:
    """Jacobian of compose(pose, delta) with respect to pose."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return np.array(
        [
            [1.0, 0.0, -s * delta.x - c * delta.y],
            [0.0, 1.0, c * delta.x - s * delta.y],
            [0.0, 0.0, 1.0],
        ]
    )
