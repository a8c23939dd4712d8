"""Local observability and identifiability tests for differential-algebraic models."""

from .model import AugmentedModel, DaeModel, ModelError, augment, load_model, to_implicit
from .ranktest import EvalPoint, RankReport, check_identifiability, check_observability, lie_observability
from .stack import build_stack, identifiability_blocks, observability_blocks

__version__ = "0.1.0"

__all__ = [
    "AugmentedModel", "DaeModel", "EvalPoint", "ModelError", "RankReport",
    "augment", "build_stack", "check_identifiability", "check_observability",
    "identifiability_blocks", "lie_observability", "load_model", "observability_blocks",
    "to_implicit",
]
