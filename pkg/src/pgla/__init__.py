"""Testbed for gradient leakage attacks on perturbed federated-learning updates.

The package simulates clients that share clipped, noise-perturbed gradients,
trains a diffusion model on surrogate gradients to strip that noise, inverts
the recovered gradients back to training images, and scores each step.
"""

from .config import ExperimentConfig, load_config
from .errors import PglaError
from .layout import GradientVector, LayerLayout
from .rng import Rng

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "GradientVector", "LayerLayout", "PglaError", "Rng", "load_config",
           "__version__"]
