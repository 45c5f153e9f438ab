"""Reflectance-guided few-shot crack segmentation."""
from .config import TrainConfig
from .data import CrackStyle, Dataset, Episode, ImageSample
from .engine import EvalReport, evaluate, run_ablation, train

__all__ = ["CrackStyle", "Dataset", "Episode", "EvalReport", "ImageSample", "TrainConfig",
           "evaluate", "run_ablation", "train"]
__version__ = "0.1.0"
