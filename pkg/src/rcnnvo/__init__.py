"""Monocular visual odometry with a recurrent convolutional network.

A conv encoder over stacked consecutive frames feeds two LSTM layers and a
linear head that regresses the 6-DoF relative pose of each step; composing
the steps yields the absolute trajectory at learned metric scale.  The
package bundles the autodiff core, KITTI-format data handling, training,
drift-metric evaluation, and a CLI tying them together.
"""

from .autodiff import Rng, Tensor, no_record
from .dataset import MeanRgb, Segment, SequenceDataset
from .errors import ConfigError, DataError, NumericError
from .evaluation import EvalReport, Trajectory
from .geometry import Pose6, PoseSE3
from .network import CONV_LAYERS, LstmParams, LstmState, VoModel, build_model
from .training import AdagradState, TrainConfig, TrainLog

__version__ = "0.1.0"
