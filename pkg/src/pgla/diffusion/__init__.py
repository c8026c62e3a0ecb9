"""Gradient diffusion model: schedule, training and adaptive reverse sampling."""

from .predictor import (DenseDenoiser, NoisePredictor, NoisyConditions, TrainConfig, TrainResult, train,
                        validation_draws, validation_loss)
from .sampling import DenoiseRequest, denoise, entry_point, entry_scale, sample_reverse
from .schedule import (NoiseSchedule, PosteriorParams, loss_weights, make_schedule,
                       map_M_to_Tprime, posterior_coefficients, posterior_params, q_sample,
                       q_step, tprime_for_gamma)

__all__ = [
    "DenseDenoiser", "NoisePredictor", "NoisyConditions", "TrainConfig", "TrainResult", "train",
    "validation_draws", "validation_loss", "DenoiseRequest", "denoise", "entry_point",
    "entry_scale", "sample_reverse", "NoiseSchedule", "PosteriorParams", "loss_weights",
    "make_schedule", "map_M_to_Tprime", "posterior_coefficients", "posterior_params",
    "q_sample", "q_step", "tprime_for_gamma",
]
