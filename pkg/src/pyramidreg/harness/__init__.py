"""File formats, synthetic data, optimisation and the train/register/evaluate loops."""
from .io import load_bundle, load_checkpoint, load_landmarks, save_bundle, save_checkpoint, save_landmarks
from .optim import AdamState, adam_step, lr_schedule
from .synth import SynthPair, synth_pair
from .train import DESK_CONFIG, TrainConfig, deterministic, evaluate, register, train

__all__ = [
    "save_bundle", "load_bundle", "save_landmarks", "load_landmarks", "save_checkpoint", "load_checkpoint",
    "AdamState", "adam_step", "lr_schedule", "SynthPair", "synth_pair",
    "TrainConfig", "DESK_CONFIG", "deterministic", "train", "register", "evaluate",
]
