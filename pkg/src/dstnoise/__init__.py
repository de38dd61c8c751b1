"""Dialogue state tracking with noised previous-state training."""

from .corpus import Dialogue, SyntheticConfig, Turn, generate_synthetic_corpus, load_corpus, split_corpus
from .inference import PredictionRecord, rollout_corpus
from .model import DSTModel, ModelConfig
from .noise import NoiseConfig, make_noised_pair, noise_state
from .ontology import NONE, DialogueState, Ontology
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "NONE", "Checkpoint", "DSTModel", "Dialogue", "DialogueState", "ModelConfig", "NoiseConfig", "Ontology",
    "PredictionRecord", "SyntheticConfig", "TrainConfig", "Turn", "generate_synthetic_corpus", "load_checkpoint",
    "load_corpus", "make_noised_pair", "noise_state", "rollout_corpus", "save_checkpoint", "split_corpus", "train",
]
