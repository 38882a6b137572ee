"""Continual learning for a frozen dual encoder with two adapter families.

A task-shared LoRA keeps zero-shot behaviour on unseen domains, a routed
multi-head LoRA mixture learns each new domain, and a prototype selector
decides per sample which of the two to use.
"""
from .errors import ChecksumError, ContractError, FormatError, FrozenParameterError, ShapeError, VersionError
from .model import ModelState, TrainConfig, fixture_config
from .trainer import run_stream, train_task

__all__ = [
    "ChecksumError",
    "ContractError",
    "FormatError",
    "FrozenParameterError",
    "ModelState",
    "ShapeError",
    "TrainConfig",
    "VersionError",
    "fixture_config",
    "run_stream",
    "train_task",
]
__version__ = "0.1.0"
