"""Streaming trajectory forecasting with endpoint-anchored context encoding."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig
from .model import Prediction, StreamingPredictor
from .scenario import Scenario, load_scenario, save_scenario

__all__ = [
    "ModelConfig", "Prediction", "Scenario", "StreamingPredictor",
    "TrainConfig", "load_scenario", "save_scenario", "__version__",
]
