"""Adaptive testing toolkit: an RL-trained agent that picks informative test
items and estimates student ability in real time, plus the synthetic-data,
calibration, benchmarking, and serving machinery around it."""

from .calibration import CalibrationConfig, ItemBank, calibrate_bank, fit_mle, nearest_item
from .env import Action, EnvConfig, EpisodeState, GaussianNoise, NearestItem, TrialRecord
from .irt import Dataset, PriorConfig, generate_dataset, item_information, \
    sample_response, success_probability
from .nnet import NetConfig, Policy
from .ppo import PpoConfig, TrainStats, collect_rollouts, compute_gae, ppo_update, train

__version__ = "0.1.0"

__all__ = [
    "Action",
    "CalibrationConfig",
    "Dataset",
    "EnvConfig",
    "EpisodeState",
    "GaussianNoise",
    "ItemBank",
    "NearestItem",
    "NetConfig",
    "Policy",
    "PpoConfig",
    "PriorConfig",
    "TrainStats",
    "TrialRecord",
    "calibrate_bank",
    "collect_rollouts",
    "compute_gae",
    "fit_mle",
    "generate_dataset",
    "item_information",
    "nearest_item",
    "ppo_update",
    "sample_response",
    "success_probability",
    "train",
]
