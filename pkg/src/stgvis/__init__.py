"""Video instance segmentation with a spatial-temporal graph over frame pairs.

Everything runs on a small float64 reverse-mode autodiff engine built on numpy.
"""

from .config import Config, parse_config
from .metrics import EvalReport, Tube, evaluate
from .pipeline import Model, infer_video, train
from .synth import make_dataset

__all__ = ["Config", "EvalReport", "Model", "Tube", "evaluate", "infer_video", "make_dataset",
           "parse_config", "train"]
__version__ = "0.1.0"
