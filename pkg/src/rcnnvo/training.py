"""Loss, Adagrad optimization, and the epoch loop with early stopping.

The per-segment loss sums squared position error plus ``kappa`` times squared
orientation error over the segment's steps; epoch-level train/validation
losses average that quantity over segments and are always evaluated with
dropout off, so the gap between the two curves reflects generalization
rather than dropout noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .dataset import Segment
from .errors import NumericError
from .geometry import Pose6
from .network import VoModel, model_forward

__all__ = [
    "TrainConfig",
    "AdagradState",
    "TrainLog",
    "pose_loss",
    "adagrad_step",
    "train",
    "emit_loss_curves",
    "parse_loss_table",
    "segment_loss",
]

# Independent deterministic streams derived from the config seed.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_DROPOUT = 3
STREAM_SEGMENTS = 4


@dataclass(frozen=True)
class TrainConfig:
    kappa: float = 100.0
    learning_rate: float = 0.001
    max_epochs: int = 200
    dropout_rate: float = 0.5
    adagrad_epsilon: float = 1e-8
    early_stop_patience: int = 10
    seed: int = 0
    validation_fraction: float = 0.1
    grad_clip_norm: float = 5.0  # <= 0 disables clipping

    def __post_init__(self):
        if self.kappa <= 0 or self.learning_rate <= 0 or self.adagrad_epsilon <= 0:
            raise ValueError("kappa, learning_rate and adagrad_epsilon must be positive")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs and early_stop_patience must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction}")


@dataclass
class AdagradState:
    """Per-parameter accumulated squared gradients (nonnegative, nondecreasing)."""

    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_params(params: dict[str, Tensor]) -> "AdagradState":
        return AdagradState({name: np.zeros_like(t.data) for name, t in params.items()})


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; epoch of the minimum validation loss

    def record(self, epoch: int, train_loss: float, val_loss: float, secs: float) -> None:
        self.epochs.append(epoch)
        self.train_losses.append(train_loss)
        self.val_losses.append(val_loss)
        self.seconds.append(secs)


def pose_loss(estimates: Sequence[Tensor], targets: Sequence, kappa: float) -> Tensor:
    """Squared position error plus ``kappa`` times squared orientation error,
    summed over the steps of one sequence (position first in every 6-vector).
    """
    if len(estimates) != len(targets):
        raise ValueError(
            f"pose_loss: {len(estimates)} estimates vs {len(targets)} targets")
    if len(estimates) == 0:
        raise ValueError("pose_loss needs at least one step")
    weights = Tensor(np.array([1.0, 1.0, 1.0, kappa, kappa, kappa]))
    total: Optional[Tensor] = None
    for est, target in zip(estimates, targets):
        tvec = target.as_array() if isinstance(target, Pose6) else np.asarray(target)
        d = est - Tensor(tvec)
        term = (d * d * weights).sum()
        total = term if total is None else total + term
    return total


if njit is not None:
    @njit(cache=True)
    def _adagrad_flat(p: np.ndarray, g: np.ndarray, acc: np.ndarray,
                      lr: float, epsilon: float) -> None:
        for i in range(p.size):
            acc[i] += g[i] * g[i]
            p[i] -= lr * g[i] / (np.sqrt(acc[i]) + epsilon)
else:  # pragma: no cover
    _adagrad_flat = None


def adagrad_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                 state: AdagradState, lr: float, epsilon: float) -> None:
    """In-place update: G += g*g; theta -= lr * g / (sqrt(G) + epsilon)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        acc = state.accumulators[name]
        if g.shape != p.data.shape or acc.shape != p.data.shape:
            raise ValueError(
                f"adagrad_step: shape mismatch for {name}: parameter "
                f"{p.data.shape}, gradient {g.shape}, accumulator {acc.shape}")
        if (_adagrad_flat is not None and p.data.flags.c_contiguous
                and g.flags.c_contiguous and acc.flags.c_contiguous):
            _adagrad_flat(p.data.reshape(-1), g.reshape(-1), acc.reshape(-1),
                          lr, epsilon)
        else:
            acc += g * g
            denom = np.sqrt(acc)
            denom += epsilon
            np.divide(g, denom, out=denom)
            denom *= lr
            p.data -= denom


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


def segment_loss(model: VoModel, segment: Segment, kappa: float,
                 dropout_rate: float = 0.0, training: bool = False,
                 rng: Optional[Rng] = None) -> Tensor:
    """Forward one segment and compute its loss."""
    pairs = np.stack(segment.pair_tensors)
    estimates, _ = model_forward(model, pairs, dropout_rate=dropout_rate,
                                 training=training, rng=rng)
    return pose_loss(estimates, segment.targets, kappa)


def _mean_clean_loss(model: VoModel, segments: Sequence[Segment], kappa: float) -> float:
    with ad.no_record():
        losses = [segment_loss(model, seg, kappa).item() for seg in segments]
    return float(np.mean(losses))


def split_validation(segments: Sequence[Segment], fraction: float
                     ) -> tuple[list[Segment], list[Segment]]:
    """Last ``fraction`` of segments (by source ordering) become validation.

    With too few segments for a held-out split, validation falls back to the
    training set so the epoch loop still has a stopping signal.
    """
    segments = list(segments)
    n_val = int(len(segments) * fraction + 0.5)
    if n_val >= len(segments):
        n_val = len(segments) - 1
    if n_val <= 0:
        return segments, segments
    return segments[:-n_val], segments[-n_val:]


def train(model: VoModel, segments: Sequence[Segment], config: TrainConfig,
          val_loss_fn: Optional[Callable[[VoModel, Sequence[Segment]], float]] = None,
          ) -> TrainLog:
    """Optimize the model; leaves it holding the best-validation parameters.

    Per epoch: seeded shuffle, one Adagrad step per segment (dropout on),
    then dropout-off train/validation losses for the log.  Stops after
    ``early_stop_patience`` epochs without validation improvement or at
    ``max_epochs``.  Non-finite losses abort with the epoch and segment id.
    """
    train_segs, val_segs = split_validation(segments, config.validation_fraction)
    if not train_segs:
        raise ValueError("no training segments after the validation split")
    if val_loss_fn is None:
        val_loss_fn = lambda m, segs: _mean_clean_loss(m, segs, config.kappa)

    params = model.parameters()
    state = AdagradState.for_params(params)
    shuffle_rng = Rng(config.seed, STREAM_SHUFFLE)
    dropout_rng = Rng(config.seed, STREAM_DROPOUT)

    log = TrainLog()
    best_val = np.inf
    best_params: dict[str, np.ndarray] = {}
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_segs))
        for idx in order:
            seg = train_segs[idx]
            loss = segment_loss(model, seg, config.kappa,
                                dropout_rate=config.dropout_rate,
                                training=True, rng=dropout_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss ({value}) at epoch {epoch}, "
                    f"segment {seg.source}")
            for p in params.values():
                p.grad = None
            loss.backward()
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            if config.grad_clip_norm > 0:
                _clip_gradients(grads, config.grad_clip_norm)
            adagrad_step(params, grads, state, config.learning_rate,
                         config.adagrad_epsilon)

        train_loss = _mean_clean_loss(model, train_segs, config.kappa)
        val_loss = float(val_loss_fn(model, val_segs))
        log.record(epoch, train_loss, val_loss, time.perf_counter() - t0)

        if val_loss < best_val:
            best_val = val_loss
            log.best_epoch = epoch
            best_params = {name: p.data.copy() for name, p in params.items()}
        elif epoch - log.best_epoch >= config.early_stop_patience:
            break

    for name, p in params.items():
        p.data = best_params[name]
    return log


# -- loss table and curves ------------------------------------------------------


def emit_loss_curves(log: TrainLog, table_path, plot_path=None,
                     include_timing: bool = True) -> None:
    """Write the per-epoch CSV table and (optionally) the two-curve SVG plot.

    With ``include_timing=False`` the seconds column is written as 0.0 so the
    table is byte-reproducible across runs.
    """
    if not log.epochs:
        raise ValueError("cannot emit curves for an empty training log")
    table_path = Path(table_path)
    with open(table_path, "w") as f:
        f.write("epoch,train_loss,val_loss,seconds\n")
        for e, tr, va, sec in zip(log.epochs, log.train_losses,
                                  log.val_losses, log.seconds):
            shown = sec if include_timing else 0.0
            f.write(f"{e},{tr!r},{va!r},{shown!r}\n")
    if plot_path is not None:
        from .plotting import save_loss_curves
        save_loss_curves(log.epochs, log.train_losses, log.val_losses, plot_path)


def parse_loss_table(path) -> TrainLog:
    log = TrainLog()
    with open(path, "r") as f:
        header = f.readline().strip()
        if header != "epoch,train_loss,val_loss,seconds":
            raise ValueError(f"{path}: unexpected loss-table header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            e, tr, va, sec = line.split(",")
            log.record(int(e), float(tr), float(va), float(sec))
    if log.epochs:
        log.best_epoch = log.epochs[int(np.argmin(log.val_losses))]
    return log
