"""Distributed moving horizon estimation of states and parameters."""

from .model import (AugmentedModel, NoiseSpec, NonlinearModel, Trajectory, augment,
                    available_models, get_model, linearize, simulate)

__all__ = ["AugmentedModel", "NoiseSpec", "NonlinearModel", "Trajectory", "augment",
           "available_models", "get_model", "linearize", "simulate"]
__version__ = "0.1.0"
