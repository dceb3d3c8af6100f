"""Control-area estimation for badminton doubles.

Pipeline: annotation CSVs (or the synthetic generator) -> game-state
samples -> encoded court-grid channels -> pose GCN + U-Net control map ->
score-correlation analyses and positioning recommendations, served over a
CLI and an HTTP API.
"""

from .geometry import CellIndex, CourtGrid, CourtPoint, Homography
from .dataset import GameStateSample, SyntheticOracle, synth_generate
from .encoder import EncoderConfig
from .training import FocalConfig, LossConfig, TrainConfig, train
from .infer import Pipeline, load_pipeline, predict_map

__all__ = [
    "CellIndex",
    "CourtGrid",
    "CourtPoint",
    "EncoderConfig",
    "FocalConfig",
    "GameStateSample",
    "Homography",
    "LossConfig",
    "Pipeline",
    "SyntheticOracle",
    "TrainConfig",
    "load_pipeline",
    "predict_map",
    "synth_generate",
    "train",
]

__version__ = "0.1.0"
