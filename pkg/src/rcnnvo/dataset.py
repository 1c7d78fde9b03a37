"""KITTI-odometry-format ingestion and the training-sample pipeline.

Directory layout: ``<root>/sequences/<id>/image_2/%06d.png`` (a flat
``<root>/sequences/<id>/*.png`` also works) with ground truth at
``<root>/poses/<id>.txt``, 12 whitespace-separated reals per line forming
the row-major [R | t] of each camera pose.

Preprocessing follows the model contract: bilinear resize to extents that
are multiples of 64, then per-channel mean subtraction.  Consecutive frames
stack into 6-channel pairs; ground-truth targets are the relative pose of
each frame in the previous frame's coordinates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .autodiff import Rng
from .errors import DataError
from .geometry import Pose6, PoseSE3, relative_pose

__all__ = [
    "MeanRgb",
    "SequenceDataset",
    "Segment",
    "load_pose_file",
    "write_pose_file",
    "format_pose_line",
    "load_image",
    "save_image",
    "preprocess_image",
    "make_pair",
    "unstack_pair",
    "compute_mean_rgb",
    "segment_dataset",
    "list_frame_paths",
    "load_sequence",
]

EXTENT_MULTIPLE = 64


@dataclass(frozen=True)
class MeanRgb:
    """Per-channel training-set means on the 0-255 intensity scale."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(3)
        if np.any(vals < 0) or np.any(vals > 255):
            raise ValueError(f"mean RGB values must lie in [0, 255], got {vals}")
        object.__setattr__(self, "values", vals)

    @staticmethod
    def zero() -> "MeanRgb":
        return MeanRgb(np.zeros(3))


@dataclass
class SequenceDataset:
    """One image sequence, with optional ground truth.

    ``frames`` are the image paths in index order; ``images`` caches the
    preprocessed float arrays [3,H,W] once loaded.
    """

    sequence_id: str
    frames: list[Path]
    poses: Optional[list[PoseSE3]] = None
    frame_rate: float = 10.0
    images: Optional[list[np.ndarray]] = None

    def __post_init__(self):
        if self.poses is not None and len(self.poses) != len(self.frames):
            raise DataError(
                f"sequence {self.sequence_id}: {len(self.poses)} poses for "
                f"{len(self.frames)} frames")

    def __len__(self) -> int:
        return len(self.frames)

    def pair(self, k: int) -> np.ndarray:
        """Stacked pair of frames (k, k+1)."""
        if self.images is None:
            raise DataError(f"sequence {self.sequence_id}: images not loaded")
        return make_pair(self.images[k], self.images[k + 1])


@dataclass
class Segment:
    """A training window: per-step stacked pairs and relative-pose targets."""

    pair_tensors: list[np.ndarray]
    targets: list[Pose6]
    source: tuple[str, int, int]  # (sequence id, start frame, length in pairs)

    def __post_init__(self):
        if len(self.targets) != len(self.pair_tensors) or len(self.targets) < 1:
            raise ValueError(
                f"segment {self.source}: {len(self.pair_tensors)} pairs vs "
                f"{len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.pair_tensors)


# -- pose files ---------------------------------------------------------------


def _project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (special orthogonal Procrustes)."""
    u, _, vt = np.linalg.svd(M)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] = -u[:, -1]
        R = u @ vt
    return R


def load_pose_file(path) -> list[PoseSE3]:
    """Parse a KITTI pose file; one [R | t] row-major 3x4 per line.

    Rotations off orthonormal by more than 1e-4 are rejected; violations
    above 1e-7 are projected back onto SO(3) with a warning.  Values within
    the file's own 9-significant-digit precision are taken verbatim so that
    parse/format round trips are bit-exact.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"pose file not found: {path}")
    poses: list[PoseSE3] = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 12:
                raise DataError(
                    f"{path}:{lineno}: expected 12 values per pose line, "
                    f"got {len(fields)}")
            try:
                vals = np.array([float(v) for v in fields])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            mat = vals.reshape(3, 4)
            R, t = mat[:, :3], mat[:, 3]
            err = max(np.abs(R.T @ R - np.eye(3)).max(),
                      abs(np.linalg.det(R) - 1.0))
            if err > 1e-4:
                raise DataError(
                    f"{path}:{lineno}: rotation violates orthonormality by {err:.2e}")
            if err > 1e-7:
                warnings.warn(
                    f"{path}:{lineno}: re-orthonormalized rotation "
                    f"(violation {err:.2e})")
                R = _project_to_rotation(R)
            poses.append(PoseSE3(R, t.copy()))
    if not poses:
        raise DataError(f"{path}: empty pose file")
    return poses


def format_pose_line(pose: PoseSE3) -> str:
    """Row-major [R | t] with 9 significant digits, space-separated."""
    mat = np.hstack([pose.R, pose.t.reshape(3, 1)])
    return " ".join(f"{v:.9g}" for v in mat.reshape(12))


def write_pose_file(path, poses: Sequence[PoseSE3]) -> None:
    with open(path, "w") as f:
        for pose in poses:
            f.write(format_pose_line(pose) + "\n")


# -- images -------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Decode a PNG to [3,H,W] float64 on the 0-255 scale.

    Grayscale images are replicated across the three channels.
    """
    with Image.open(path) as img:
        if img.mode not in ("RGB", "L"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def save_image(path, image: np.ndarray) -> None:
    """Write [3,H,W] values (0-255) as an 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resample of [C,H,W]."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess_image(image: np.ndarray, mean: MeanRgb,
                     target: tuple[int, int]) -> np.ndarray:
    """Bilinear-resize to ``target`` (multiples of 64), subtract channel means."""
    out_h, out_w = target
    for label, extent in (("height", out_h), ("width", out_w)):
        if extent <= 0 or extent % EXTENT_MULTIPLE != 0:
            raise ValueError(
                f"target {label} must be a positive multiple of "
                f"{EXTENT_MULTIPLE}, got {extent}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got shape {image.shape}")
    resized = _resize_bilinear(image, out_h, out_w)
    return resized - mean.values[:, None, None]


def make_pair(prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    """Stack two [3,H,W] frames along channels: prev in 0-2, next in 3-5."""
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise ValueError(f"frame extents differ: {prev.shape} vs {nxt.shape}")
    if prev.ndim != 3 or prev.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] frames, got shape {prev.shape}")
    return np.concatenate([prev, nxt], axis=0)


def unstack_pair(pair: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pair = np.asarray(pair)
    if pair.ndim != 3 or pair.shape[0] != 6:
        raise ValueError(f"expected [6,H,W] pair, got shape {pair.shape}")
    return pair[:3].copy(), pair[3:].copy()


def compute_mean_rgb(images: Iterable[np.ndarray]) -> MeanRgb:
    """Streaming per-channel mean over all pixels of all images."""
    sums = np.zeros(3)
    count = 0
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"expected [3,H,W] images, got shape {img.shape}")
        sums += img.reshape(3, -1).sum(axis=1)
        count += img.shape[1] * img.shape[2]
    if count == 0:
        raise DataError("mean RGB needs at least one image")
    return MeanRgb(sums / count)


# -- segmentation ---------------------------------------------------------------


def segment_dataset(ds: SequenceDataset, min_len: int, max_len: int,
                    stride: int, rng: Rng) -> list[Segment]:
    """Cut a ground-truthed sequence into overlapping training windows.

    Window starts advance by ``stride`` frames; each window's pair count is
    drawn uniformly from [min_len, max_len] (clipped to what fits).  A window
    of length L covers frames [s, s+L] and yields L pairs with per-step
    relative-pose targets.  Sequences too short for min_len produce nothing.
    """
    if not (1 <= min_len <= max_len) or stride < 1:
        raise ValueError(
            f"need 1 <= min_len <= max_len and stride >= 1, "
            f"got ({min_len}, {max_len}, {stride})")
    if ds.poses is None:
        raise DataError(f"sequence {ds.sequence_id}: segmentation needs ground truth")
    segments: list[Segment] = []
    n = len(ds)
    for start in range(0, n, stride):
        feasible = min(max_len, n - 1 - start)
        if feasible < min_len:
            continue
        length = int(rng.integers(min_len, feasible))
        pairs = [ds.pair(start + k) for k in range(length)]
        targets = [
            Pose6.from_se3(relative_pose(ds.poses[start + k], ds.poses[start + k + 1]))
            for k in range(length)
        ]
        segments.append(Segment(pairs, targets, (ds.sequence_id, start, length)))
    return segments


# -- sequence loading -----------------------------------------------------------


def list_frame_paths(root, sequence_id: str, camera_dir: str = "image_2") -> list[Path]:
    """Frame paths for a sequence, sorted by index; supports the flat layout."""
    seq_dir = Path(root) / "sequences" / sequence_id
    image_dir = seq_dir / camera_dir
    if not image_dir.is_dir():
        image_dir = seq_dir
    if not image_dir.is_dir():
        raise DataError(f"no image directory for sequence {sequence_id} under {root}")
    frames = sorted(image_dir.glob("*.png"))
    if not frames:
        raise DataError(f"no PNG frames in {image_dir}")
    return frames


def load_sequence(root, sequence_id: str, target: tuple[int, int],
                  mean: MeanRgb, camera_dir: str = "image_2",
                  frame_rate: float = 10.0,
                  require_poses: bool = False) -> SequenceDataset:
    """Load and preprocess a full sequence; attaches poses when present."""
    frames = list_frame_paths(root, sequence_id, camera_dir)
    pose_path = Path(root) / "poses" / f"{sequence_id}.txt"
    poses = None
    if pose_path.exists():
        poses = load_pose_file(pose_path)
    elif require_poses:
        raise DataError(f"missing pose file: {pose_path}")
    images = [preprocess_image(load_image(p), mean, target) for p in frames]
    return SequenceDataset(sequence_id, frames, poses, frame_rate, images)
