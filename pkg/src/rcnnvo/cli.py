"""Command-line entry point: ``rcnn-vo <train|infer|eval|synth>``.

Every subcommand reads one config file (``--config``) with optional
``--set key=value`` overrides and writes its artifacts under a per-run
directory named from the resolved configuration, so identical configs land
in identical places with identical bytes.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .config import RunConfig, load_run_config, run_directory
from .dataset import compute_mean_rgb, load_image, load_sequence, load_pose_file, \
    list_frame_paths, segment_dataset
from .errors import ConfigError, DataError, NumericError
from .evaluation import EvalReport, Trajectory, aggregate, emit_trajectory_plot, \
    export_trajectory, infer_trajectory, load_trajectory, segment_errors, \
    write_report_tables, format_summary
from .network import build_model, load_model, save_model
from .synth import write_synthetic_dataset
from .training import STREAM_INIT, STREAM_SEGMENTS, emit_loss_curves, train

__all__ = ["main", "cmd_train", "cmd_infer", "cmd_eval", "cmd_synth"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are config errors (exit 1)
        raise ConfigError(message)


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if not getattr(cfg, key):
            raise ConfigError(f"config key {key!r} is required for this command")


def cmd_train(cfg: RunConfig) -> int:
    """Prepare data, train, and write checkpoint + loss table + loss curves."""
    _require(cfg, "dataset_root", "train_sequences")
    out_dir = run_directory(cfg, "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    target = (cfg.image_height, cfg.image_width)

    frame_paths = []
    for seq in cfg.train_sequences:
        frame_paths.extend(list_frame_paths(cfg.dataset_root, seq, cfg.camera_dir))
    mean = compute_mean_rgb(load_image(p) for p in frame_paths)

    seg_rng = Rng(cfg.seed, STREAM_SEGMENTS)
    segments = []
    for seq in cfg.train_sequences:
        ds = load_sequence(cfg.dataset_root, seq, target, mean, cfg.camera_dir,
                           cfg.frame_rate, require_poses=True)
        segments.extend(segment_dataset(ds, cfg.min_len, cfg.max_len, cfg.stride, seg_rng))
    if not segments:
        raise DataError(
            f"no training segments: sequences {cfg.train_sequences} are shorter "
            f"than min_len + 1 = {cfg.min_len + 1} frames")

    model = build_model(cfg.image_height, cfg.image_width, cfg.hidden,
                        Rng(cfg.seed, STREAM_INIT), mean.values)
    log = train(model, segments, cfg.to_train_config())

    ckpt_path = out_dir / "checkpoint.ckpt"
    save_model(ckpt_path, model,
               extra={"kappa": repr(cfg.kappa), "seed": str(cfg.seed)})
    emit_loss_curves(log, out_dir / "loss_table.csv", out_dir / "loss_curves.svg",
                     include_timing=cfg.table_timing)
    print(f"trained {log.epochs[-1]} epochs (best epoch {log.best_epoch}, "
          f"val loss {min(log.val_losses):.6g})")
    print(f"wrote {ckpt_path}")
    return 0


def _load_checkpoint_model(cfg: RunConfig):
    _require(cfg, "checkpoint")
    model, manifest = load_model(cfg.checkpoint)
    if (model.image_height, model.image_width) != (cfg.image_height, cfg.image_width):
        raise ConfigError(
            f"checkpoint extents {model.image_height}x{model.image_width} do not "
            f"match configured {cfg.image_height}x{cfg.image_width}")
    return model, manifest


def cmd_infer(cfg: RunConfig) -> int:
    """Run the model over each test sequence and write KITTI pose files."""
    _require(cfg, "dataset_root", "test_sequences")
    model, _ = _load_checkpoint_model(cfg)
    out_dir = run_directory(cfg, "infer") / "trajectories"
    out_dir.mkdir(parents=True, exist_ok=True)
    mean = model.mean_rgb
    from .dataset import MeanRgb
    for seq in cfg.test_sequences:
        ds = load_sequence(cfg.dataset_root, seq,
                           (model.image_height, model.image_width),
                           MeanRgb(mean), cfg.camera_dir, cfg.frame_rate)
        traj = infer_trajectory(model, ds)
        path = out_dir / f"{seq}.txt"
        export_trajectory(traj, path)
        print(f"wrote {path} ({len(traj)} poses)")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    """Compare estimates against ground truth; write tables and plots."""
    _require(cfg, "dataset_root", "test_sequences", "estimates_dir")
    out_dir = run_directory(cfg, "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    lengths_reports: dict[str, EvalReport] = {}
    for seq in cfg.test_sequences:
        gt_path = Path(cfg.dataset_root) / "poses" / f"{seq}.txt"
        gt = Trajectory(load_pose_file(gt_path), cfg.frame_rate)
        est_path = Path(cfg.estimates_dir) / f"{seq}.txt"
        est = load_trajectory(est_path, cfg.frame_rate)
        rows = segment_errors(gt, est, start_stride=cfg.eval_start_stride)
        if not rows:
            print(f"sequence {seq}: too short for the shortest path length, skipped")
            continue
        report = aggregate(rows, cfg.speed_bin_width)
        lengths_reports[seq] = report
        write_report_tables(report, out_dir / f"{seq}_by_length.csv",
                            out_dir / f"{seq}_by_speed.csv")
        emit_trajectory_plot([("ground truth", gt), ("estimate", est)],
                             out_dir / f"{seq}_trajectories.svg")
    if not lengths_reports:
        raise DataError("no sequence was long enough to evaluate")
    summary = format_summary(lengths_reports)
    (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    print(f"wrote evaluation to {out_dir}")
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    """Generate a synthetic dataset with exact ground truth."""
    _require(cfg, "dataset_root")
    ids = write_synthetic_dataset(
        cfg.dataset_root, cfg.synth_profiles, cfg.synth_frames,
        cfg.image_height, cfg.image_width, cfg.synth_step,
        cfg.synth_turn_rate, cfg.synth_gsd, cfg.seed)
    print(f"wrote sequences {', '.join(ids)} under {cfg.dataset_root}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = _Parser(prog="rcnn-vo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="path to a key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
    try:
        args = parser.parse_args(argv)
        cfg = load_run_config(args.config, args.overrides)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"rcnn-vo: config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"rcnn-vo: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"rcnn-vo: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"rcnn-vo: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
