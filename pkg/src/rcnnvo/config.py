"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Unknown keys are rejected so typos fail fast.  The set of resolved values
hashes to a stable run identifier, which names the per-run output directory
(no timestamps, so reruns and CI diffs land in the same place).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError
from .training import TrainConfig

__all__ = ["RunConfig", "load_run_config", "config_hash", "run_directory"]


@dataclass
class RunConfig:
    # paths and dataset selection
    dataset_root: str = ""
    output_dir: str = "runs"
    run_label: str = ""
    checkpoint: str = ""
    estimates_dir: str = ""
    train_sequences: tuple[str, ...] = ()
    test_sequences: tuple[str, ...] = ()
    camera_dir: str = "image_2"
    frame_rate: float = 10.0
    # model input extents
    image_height: int = 64
    image_width: int = 64
    # training
    kappa: float = 100.0
    learning_rate: float = 0.001
    max_epochs: int = 200
    dropout_rate: float = 0.5
    adagrad_epsilon: float = 1e-8
    early_stop_patience: int = 10
    seed: int = 0
    validation_fraction: float = 0.1
    grad_clip_norm: float = 5.0
    hidden: int = 1000
    # trajectory segmentation
    min_len: int = 5
    max_len: int = 10
    stride: int = 5
    # evaluation
    eval_start_stride: int = 10
    speed_bin_width: float = 2.0
    # synthetic data generation
    synth_profiles: tuple[str, ...] = ("straight", "turn")
    synth_frames: int = 24
    synth_step: float = 0.1
    synth_turn_rate: float = 0.02
    synth_gsd: float = 0.1
    # wall-clock seconds in the emitted loss table (off keeps outputs
    # byte-reproducible across runs)
    table_timing: bool = False

    def __post_init__(self):
        overlap = set(self.train_sequences) & set(self.test_sequences)
        if overlap:
            raise ConfigError(
                f"train and test sequences must be disjoint; both contain "
                f"{sorted(overlap)}")

    def to_train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                kappa=self.kappa,
                learning_rate=self.learning_rate,
                max_epochs=self.max_epochs,
                dropout_rate=self.dropout_rate,
                adagrad_epsilon=self.adagrad_epsilon,
                early_stop_patience=self.early_stop_patience,
                seed=self.seed,
                validation_fraction=self.validation_fraction,
                grad_clip_norm=self.grad_clip_norm,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"expected true/false, got {raw!r}")
        if kind.startswith("tuple"):
            if not raw:
                return ()
            return tuple(part.strip() for part in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _parse_lines(lines: Sequence[str], origin: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {stripped!r}")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_run_config(path: Optional[str] = None,
                    overrides: Sequence[str] = ()) -> RunConfig:
    """Read a config file and apply ``key=value`` override strings."""
    values: dict[str, object] = {}
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise ConfigError(f"config file not found: {cfg_path}")
        values.update(_parse_lines(cfg_path.read_text().splitlines(), str(cfg_path)))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"--set: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(**values)


def config_hash(cfg: RunConfig) -> str:
    """First 8 hex digits of the hash over every resolved config value."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    digest = hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
    return digest[:8]


def run_directory(cfg: RunConfig, subcommand: str) -> Path:
    label = cfg.run_label or subcommand
    return Path(cfg.output_dir) / f"{label}-{config_hash(cfg)}"
