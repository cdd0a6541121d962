"""Degenerate taxis lab - finite-volume simulator and estimate auditor for a doubly degenerate nutrient-taxis system."""

__version__ = "1.0.0"

from .config import config
from .grid import GridSpec, ScalarField
from .model import ModelParams
from .stepper import SimState, StepControl, run

__all__ = ["config", "GridSpec", "ScalarField", "ModelParams", "SimState", "StepControl", "run"]
