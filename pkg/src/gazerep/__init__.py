"""Micro-macro temporal-convolutional autoencoders for eye-movement signals."""
from .model import Autoencoder, ModelConfig, Representation
from .signal import GazeTrial, TrialMeta, preprocess
from .train import AdamState, TrainConfig, fit

__all__ = ["Autoencoder", "ModelConfig", "Representation", "GazeTrial", "TrialMeta", "preprocess",
           "AdamState", "TrainConfig", "fit"]
__version__ = "0.1.0"
