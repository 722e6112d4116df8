"""Class-incremental learning with encoded-episode replay and budgeted
concept memory."""

from .config import ExperimentConfig, parse_config
from .memory import (ConceptPair, EncodedEpisode, MemoryStore, condense_class,
                     enforce_budget, insert_episodes, load_store, memory_units,
                     merge_items, reduction_targets, save_store)
from .nn import Adam, Autoencoder, Classifier
from .trainer import (ExperimentResult, IncrementReport,
                      average_incremental_accuracy, run_experiment)

__all__ = [
    "Adam", "Autoencoder", "Classifier", "ConceptPair", "EncodedEpisode",
    "ExperimentConfig", "ExperimentResult", "IncrementReport", "MemoryStore",
    "average_incremental_accuracy", "condense_class", "enforce_budget",
    "insert_episodes", "load_store", "memory_units", "merge_items",
    "parse_config", "reduction_targets", "run_experiment", "save_store",
]

__version__ = "0.1.0"
