"""Desk-scale sequential recommender: pre-training on interaction histories,
two-tower fine-tuning on impression pairs, and offline evaluation."""

from .data import EventLog, Interaction, UserSequence, load_events, read_event_log, write_events
from .model import ArgusModel, ModelConfig
from .train import (Checkpoint, Dataset, RunConfig, evaluate, finetune, initial_checkpoint, initial_model,
                    pretrain)
from .world import WorldConfig, generate

__all__ = [
    "ArgusModel", "Checkpoint", "Dataset", "EventLog", "Interaction", "ModelConfig", "RunConfig",
    "UserSequence", "WorldConfig", "evaluate", "finetune", "generate", "initial_checkpoint", "initial_model",
    "load_events", "pretrain",
    "read_event_log", "write_events",
]
