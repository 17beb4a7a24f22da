"""Point-cloud video classification with spatio-temporal selective state-space scans."""

from .data import PointCloudVideo, SynthConfig, read_pcv, synth_generate, write_pcv
from .model import ModelConfig, TrainConfig, UstSsm, evaluate, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "PointCloudVideo", "SynthConfig", "TrainConfig", "UstSsm", "evaluate",
    "load_model", "read_pcv", "save_model", "synth_generate", "train", "write_pcv",
]
