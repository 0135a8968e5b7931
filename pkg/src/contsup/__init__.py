"""Greedy local learning with context supply (ContSup) for residual networks."""

from .backbone import (
    BackboneSpec,
    MinimalUnit,
    PartitionPlan,
    build_backbone,
    make_plan,
    partition_equal,
    partition_memory_balanced,
)
from .context import ContextSpec, resolve_sources
from .engine import GLLNetwork, TrainingConfig, evaluate, train, train_step
from .errors import ConfigError, IngestionError, InvariantViolation, NonFiniteLossError
from .heads import ObjectiveConfig

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "ConfigError",
    "ContextSpec",
    "GLLNetwork",
    "IngestionError",
    "InvariantViolation",
    "MinimalUnit",
    "NonFiniteLossError",
    "ObjectiveConfig",
    "PartitionPlan",
    "TrainingConfig",
    "build_backbone",
    "evaluate",
    "make_plan",
    "partition_equal",
    "partition_memory_balanced",
    "resolve_sources",
    "train",
    "train_step",
]
