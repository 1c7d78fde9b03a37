"""Synthetic image sequences with exact ground truth, in the KITTI layout.

The camera looks straight down at an infinite procedurally textured ground
plane, so each frame is a rigid 2-D resampling of the same smooth texture:
translation along the heading shifts the view, turning rotates it.  That
makes the inter-frame motion fully recoverable from the images while the
pose files stay exact by construction.

Motion profiles: ``straight`` (constant forward speed), ``turn`` (constant
forward speed and yaw rate), ``stop_and_go`` (forward speed alternating in
blocks of four frames).
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Rng
from .dataset import save_image, write_pose_file
from .errors import ConfigError
from .geometry import PoseSE3

__all__ = [
    "PROFILES",
    "TextureField",
    "generate_motion",
    "render_frame",
    "write_synthetic_dataset",
]

PROFILES = ("straight", "turn", "stop_and_go")
_STREAM_SYNTH_BASE = 1000
_WAVES = 6


def _heading_rotation(yaw: float) -> np.ndarray:
    """Rotation about the camera's vertical (y) axis."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def generate_motion(profile: str, frames: int, step: float,
                    turn_rate: float) -> list[PoseSE3]:
    """Absolute poses for a profile, starting at the identity.

    Each frame advances ``step`` meters along the current heading (except in
    the stopped blocks of ``stop_and_go``) and then applies the profile's
    yaw increment.
    """
    if profile not in PROFILES:
        raise ConfigError(f"unknown motion profile {profile!r}; choose from {PROFILES}")
    if frames < 1:
        raise ValueError(f"need at least one frame, got {frames}")
    poses = [PoseSE3.identity()]
    yaw = 0.0
    position = np.zeros(3)
    for k in range(frames - 1):
        if profile == "stop_and_go" and (k // 4) % 2 == 1:
            forward = 0.0
        else:
            forward = step
        rot = _heading_rotation(yaw)
        position = position + rot @ np.array([0.0, 0.0, forward])
        if profile == "turn":
            yaw += turn_rate
        poses.append(PoseSE3(_heading_rotation(yaw), position.copy()))
    return poses


class TextureField:
    """Smooth periodic ground texture: a sum of sinusoidal plane waves with
    per-channel phases and a per-sequence tint."""

    def __init__(self, rng: Rng):
        wavelengths = rng.uniform(1.5, 6.0, _WAVES)
        angles = rng.uniform(0.0, 2.0 * np.pi, _WAVES)
        self.kx = 2.0 * np.pi / wavelengths * np.cos(angles)
        self.kz = 2.0 * np.pi / wavelengths * np.sin(angles)
        self.amplitudes = rng.uniform(15.0, 35.0, _WAVES)
        self.phases = rng.uniform(0.0, 2.0 * np.pi, (3, _WAVES))
        self.tint = rng.uniform(-40.0, 40.0, 3)

    def sample(self, wx: np.ndarray, wz: np.ndarray) -> np.ndarray:
        """Intensity (0-255 scale) for world points; output [3, *wx.shape]."""
        out = np.empty((3,) + wx.shape)
        arg = wx[None, ...] * self.kx.reshape(-1, *([1] * wx.ndim)) \
            + wz[None, ...] * self.kz.reshape(-1, *([1] * wx.ndim))
        for ch in range(3):
            waves = self.amplitudes[:, None, None] \
                * np.sin(arg + self.phases[ch].reshape(-1, *([1] * wx.ndim)))
            out[ch] = 128.0 + self.tint[ch] + waves.sum(axis=0)
        return np.clip(out, 0.0, 255.0)


def render_frame(texture: TextureField, pose: PoseSE3, height: int, width: int,
                 gsd: float) -> np.ndarray:
    """Render the downward view at a pose; ``gsd`` is meters per pixel.

    Pixel (row, col) maps to the planar offset (u, v) = ((col - cx) * gsd,
    (row - cy) * gsd) in the camera's (x, z) axes, then into world
    coordinates through the pose.
    """
    cols = (np.arange(width) - (width - 1) / 2.0) * gsd
    rows = (np.arange(height) - (height - 1) / 2.0) * gsd
    u, v = np.meshgrid(cols, rows)  # u: camera x, v: camera z
    cos_y, sin_y = pose.R[0, 0], pose.R[0, 2]
    wx = pose.t[0] + u * cos_y + v * sin_y
    wz = pose.t[2] - u * sin_y + v * cos_y
    return texture.sample(wx, wz)


def write_synthetic_dataset(root, profiles: Sequence[str], frames: int = 24,
                            height: int = 64, width: int = 64,
                            step: float = 0.1, turn_rate: float = 0.02,
                            gsd: float = 0.1, seed: int = 0) -> list[str]:
    """Create ``sequences/<id>/image_2/*.png`` and ``poses/<id>.txt`` under
    ``root``; sequence ids are 00, 01, ... in profile order."""
    root = Path(root)
    ids = []
    for index, profile in enumerate(profiles):
        seq_id = f"{index:02d}"
        rng = Rng(seed, _STREAM_SYNTH_BASE + index)
        texture = TextureField(rng)
        poses = generate_motion(profile, frames, step, turn_rate)
        image_dir = root / "sequences" / seq_id / "image_2"
        image_dir.mkdir(parents=True, exist_ok=True)
        for k, pose in enumerate(poses):
            frame = np.rint(render_frame(texture, pose, height, width, gsd))
            save_image(image_dir / f"{k:06d}.png", frame)
        pose_dir = root / "poses"
        pose_dir.mkdir(parents=True, exist_ok=True)
        write_pose_file(pose_dir / f"{seq_id}.txt", poses)
        ids.append(seq_id)
    return ids
