"""SE(3) pose algebra: Euler/rotation conversions, relative poses, composition.

Euler convention throughout: R = Rz(yaw) @ Ry(pitch) @ Rx(roll), i.e. the
angle vector is (roll, pitch, yaw) applied about the fixed camera axes
(x right, y down, z forward).  Angles are radians; pitch lives on the
principal branch [-pi/2, pi/2].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PoseSE3",
    "Pose6",
    "euler_to_rotation",
    "rotation_to_euler",
    "relative_pose",
    "compose_trajectory",
    "GIMBAL_LOCK_EPS",
]

GIMBAL_LOCK_EPS = 1e-6
_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform: 3x3 rotation ``R`` plus translation ``t`` in meters."""

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other (apply ``other`` in this pose's frame)."""
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m


@dataclass(frozen=True)
class Pose6:
    """Six-value pose: position ``p`` (m) and Euler orientation ``phi`` (rad)."""

    p: np.ndarray
    phi: np.ndarray

    @staticmethod
    def zero() -> "Pose6":
        return Pose6(np.zeros(3), np.zeros(3))

    def as_array(self) -> np.ndarray:
        """Flat (p, phi) vector of length 6, position first."""
        return np.concatenate([self.p, self.phi])

    @staticmethod
    def from_array(v: np.ndarray) -> "Pose6":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return Pose6(v[:3].copy(), v[3:].copy())

    def to_se3(self) -> PoseSE3:
        return PoseSE3(euler_to_rotation(self.phi), np.asarray(self.p, dtype=np.float64))

    @staticmethod
    def from_se3(pose: PoseSE3) -> "Pose6":
        return Pose6(np.asarray(pose.t, dtype=np.float64).copy(), rotation_to_euler(pose.R))


def euler_to_rotation(phi) -> np.ndarray:
    """(roll, pitch, yaw) -> Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    roll, pitch, yaw = np.asarray(phi, dtype=np.float64).reshape(3)
    ca, sa = np.cos(roll), np.sin(roll)
    cb, sb = np.cos(pitch), np.sin(pitch)
    cc, sc = np.cos(yaw), np.sin(yaw)
    return np.array([
        [cb * cc, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [cb * sc, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ])


def _check_rotation(R: np.ndarray, tol: float) -> None:
    err = max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
    if err > tol:
        raise ValueError(
            f"matrix is not a rotation (orthonormality violation {err:.3e} > {tol:.0e})")


def rotation_to_euler(R) -> np.ndarray:
    """Principal-branch inverse of euler_to_rotation.

    At gimbal lock (|cos pitch| < 1e-6) roll is fixed to 0 and yaw absorbs
    the remaining rotation, so the result is still well defined.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation matrix must be 3x3, got {R.shape}")
    _check_rotation(R, _ORTHO_TOL)
    sb = -R[2, 0]
    sb = min(1.0, max(-1.0, sb))
    pitch = np.arcsin(sb)
    if abs(np.cos(pitch)) < GIMBAL_LOCK_EPS:
        # Axes x and z coincide; conventionally put everything into yaw.
        roll = 0.0
        yaw = np.arctan2(-R[0, 1], R[1, 1])
    else:
        roll = np.arctan2(R[2, 1], R[2, 2])
        yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def relative_pose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose of ``b`` expressed in ``a``'s frame: a^-1 ∘ b."""
    return PoseSE3(a.R.T @ b.R, a.R.T @ (b.t - a.t))


def compose_trajectory(relatives, start: PoseSE3 | None = None) -> list[PoseSE3]:
    """Chain per-step relative poses into absolute ones.

    ``relatives`` are Pose6 or PoseSE3 steps; the output has one more pose
    than the input, beginning with ``start`` (identity by default).
    """
    relatives = list(relatives)
    if not relatives:
        raise ValueError("compose_trajectory needs at least one relative pose")
    current = start if start is not None else PoseSE3.identity()
    out = [current]
    for rel in relatives:
        step = rel.to_se3() if isinstance(rel, Pose6) else rel
        current = current.compose(step)
        out.append(current)
    return out
