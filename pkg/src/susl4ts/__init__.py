"""Time-series classification with partial labels via a GMM deep generative model."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .datasets import DatasetBundle, RegimeSpec, load_bundle, make_waveforms, znormalize
from .estimator import SuSLClassifier
from .evaluation import EvalReport, evaluate, map_clusters, score
from .model import ModelConfig, Parameters, load_checkpoint, save_checkpoint
from .objective import LossWeights, total_loss
from .trainer import TrainConfig, fit, train

__all__ = [
    "DatasetBundle", "EvalReport", "LossWeights", "ModelConfig", "Parameters", "RegimeSpec",
    "SuSLClassifier", "TrainConfig", "evaluate", "fit", "load_bundle", "load_checkpoint",
    "make_waveforms", "map_clusters", "save_checkpoint", "score", "total_loss", "train",
    "znormalize",
]
