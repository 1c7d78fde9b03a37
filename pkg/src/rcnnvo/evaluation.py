"""Odometry drift metrics over fixed path lengths, plus trajectory helpers.

Errors follow the standard benchmark recipe: from every ``start_stride``-th
frame, find the first frame at least L meters further along the ground-truth
path (L in 100..800 m), form the relative-transform discrepancy between
ground truth and estimate over that subsequence, and normalize by L.
Translational drift is a fraction of path length; rotational drift is
radians per meter.  Only relative transforms enter, so the metric is
invariant to a common rigid change of the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import SequenceDataset, load_pose_file, write_pose_file
from .errors import DataError
from .geometry import Pose6, PoseSE3, compose_trajectory, relative_pose
from .network import VoModel, model_forward

__all__ = [
    "DEFAULT_LENGTHS",
    "Trajectory",
    "ErrorRow",
    "EvalReport",
    "cumulative_distances",
    "segment_errors",
    "aggregate",
    "infer_trajectory",
    "export_trajectory",
    "load_trajectory",
    "emit_trajectory_plot",
    "write_report_tables",
    "read_report_table",
]

DEFAULT_LENGTHS: tuple[float, ...] = tuple(float(v) for v in range(100, 900, 100))


@dataclass
class Trajectory:
    """Ordered absolute poses with timestamps derived from the frame rate."""

    poses: list[PoseSE3]
    frame_rate: float = 10.0

    def __post_init__(self):
        if not self.poses:
            raise ValueError("a trajectory needs at least one pose")
        if self.frame_rate <= 0:
            raise ValueError(f"frame rate must be positive, got {self.frame_rate}")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.poses)) / self.frame_rate


@dataclass(frozen=True)
class ErrorRow:
    start: int
    length: float
    t_err: float  # fraction of path length
    r_err: float  # radians per meter
    speed: float  # meters per second


@dataclass
class EvalReport:
    """Mean drift per path length, per speed bin, and over all subsequences
    (the overall pair converted to percent and degrees per 100 m)."""

    per_length: dict[float, tuple[float, float]] = field(default_factory=dict)
    per_speed: dict[float, tuple[float, float]] = field(default_factory=dict)
    t_rel_percent: float = 0.0
    r_rel_deg_per_100m: float = 0.0
    row_count: int = 0


def cumulative_distances(traj: Trajectory) -> np.ndarray:
    """Path length along the trajectory: d_0 = 0, d_k = d_{k-1} + step."""
    pts = np.array([p.t for p in traj.poses])
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _rotation_angle(R: np.ndarray) -> float:
    cos_angle = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, cos_angle))))


def segment_errors(gt: Trajectory, est: Trajectory,
                   lengths: Sequence[float] = DEFAULT_LENGTHS,
                   start_stride: int = 10) -> list[ErrorRow]:
    """Drift rows for all (start, length) subsequences that fit.

    The endpoint of a subsequence is the first frame whose ground-truth path
    distance from the start reaches the target length (no interpolation).
    Trajectories shorter than the smallest length yield an empty list.
    """
    if len(gt) != len(est):
        raise DataError(
            f"trajectory lengths differ: ground truth has {len(gt)} poses, "
            f"estimate has {len(est)}")
    if start_stride < 1:
        raise ValueError(f"start_stride must be >= 1, got {start_stride}")
    dist = cumulative_distances(gt)
    n = len(gt)
    rows: list[ErrorRow] = []
    for start in range(0, n, start_stride):
        for length in lengths:
            j = int(np.searchsorted(dist, dist[start] + length, side="left"))
            if j >= n:
                continue
            gt_rel = relative_pose(gt.poses[start], gt.poses[j])
            est_rel = relative_pose(est.poses[start], est.poses[j])
            error = relative_pose(gt_rel, est_rel)
            t_err = float(np.linalg.norm(error.t)) / length
            r_err = _rotation_angle(error.R) / length
            elapsed = (j - start) / gt.frame_rate
            speed = (dist[j] - dist[start]) / elapsed
            rows.append(ErrorRow(start, float(length), t_err, r_err, speed))
    return rows


def aggregate(rows: Sequence[ErrorRow], speed_bin_width: float = 2.0) -> EvalReport:
    """Average drift per path length and per speed bin (keyed by lower edge),
    plus the overall means in benchmark units."""
    if not rows:
        raise ValueError("aggregate needs at least one error row")
    report = EvalReport(row_count=len(rows))
    by_length: dict[float, list[ErrorRow]] = {}
    by_speed: dict[float, list[ErrorRow]] = {}
    for row in rows:
        by_length.setdefault(row.length, []).append(row)
        bin_edge = float(np.floor(row.speed / speed_bin_width) * speed_bin_width)
        by_speed.setdefault(bin_edge, []).append(row)
    for length in sorted(by_length):
        group = by_length[length]
        report.per_length[length] = (
            float(np.mean([r.t_err for r in group])),
            float(np.mean([r.r_err for r in group])),
        )
    for edge in sorted(by_speed):
        group = by_speed[edge]
        report.per_speed[edge] = (
            float(np.mean([r.t_err for r in group])),
            float(np.mean([r.r_err for r in group])),
        )
    mean_t = float(np.mean([r.t_err for r in rows]))
    mean_r = float(np.mean([r.r_err for r in rows]))
    report.t_rel_percent = mean_t * 100.0
    report.r_rel_deg_per_100m = mean_r * (180.0 / np.pi) * 100.0
    return report


def infer_trajectory(model: VoModel, ds: SequenceDataset) -> Trajectory:
    """Compose the model's per-step relative estimates from an identity start.

    No rescaling and no alignment to ground truth: the absolute trajectory is
    exactly what the network's outputs chain to.  Output length equals the
    frame count.
    """
    if len(ds) < 2:
        raise DataError(
            f"sequence {ds.sequence_id}: need at least 2 frames, got {len(ds)}")
    pairs = np.stack([ds.pair(k) for k in range(len(ds) - 1)])
    with ad.no_record():
        estimates, _ = model_forward(model, pairs)
    relatives = [Pose6.from_array(e.data) for e in estimates]
    return Trajectory(compose_trajectory(relatives), ds.frame_rate)


def export_trajectory(traj: Trajectory, path) -> None:
    write_pose_file(path, traj.poses)


def load_trajectory(path, frame_rate: float = 10.0) -> Trajectory:
    return Trajectory(load_pose_file(path), frame_rate)


def emit_trajectory_plot(labeled: Sequence[tuple[str, Trajectory]], path) -> None:
    from .plotting import save_trajectory_plot
    save_trajectory_plot([(label, traj.poses) for label, traj in labeled], path)


# -- report files ---------------------------------------------------------------


def write_report_tables(report: EvalReport, length_path, speed_path) -> None:
    """Delimited per-length and per-speed tables (t_rel fraction, r_err rad/m)."""
    with open(length_path, "w") as f:
        f.write("length,t_rel,r_rel\n")
        for length, (t, r) in report.per_length.items():
            f.write(f"{length!r},{t!r},{r!r}\n")
    with open(speed_path, "w") as f:
        f.write("speed,t_rel,r_rel\n")
        for edge, (t, r) in report.per_speed.items():
            f.write(f"{edge!r},{t!r},{r!r}\n")


def read_report_table(path) -> dict[float, tuple[float, float]]:
    out: dict[float, tuple[float, float]] = {}
    with open(path, "r") as f:
        header = f.readline().strip()
        if header not in ("length,t_rel,r_rel", "speed,t_rel,r_rel"):
            raise ValueError(f"{path}: unexpected report header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, t, r = line.split(",")
            out[float(key)] = (float(t), float(r))
    return out


def format_summary(per_sequence: dict[str, EvalReport]) -> str:
    """Human-readable per-sequence summary with the overall mean row."""
    lines = [f"{'Seq.':>6}  {'t_rel(%)':>10}  {'r_rel(deg/100m)':>16}"]
    for seq in sorted(per_sequence):
        rep = per_sequence[seq]
        lines.append(f"{seq:>6}  {rep.t_rel_percent:>10.4f}  {rep.r_rel_deg_per_100m:>16.4f}")
    if per_sequence:
        mean_t = float(np.mean([r.t_rel_percent for r in per_sequence.values()]))
        mean_r = float(np.mean([r.r_rel_deg_per_100m for r in per_sequence.values()]))
        lines.append(f"{'mean':>6}  {mean_t:>10.4f}  {mean_r:>16.4f}")
    return "\n".join(lines) + "\n"
