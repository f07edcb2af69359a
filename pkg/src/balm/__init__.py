"""Bayesian adaptive latent mixtures for zero-inflated weighted multilayer networks."""

__version__ = "0.1.0"

from .errors import (BalmError, ConfigError, DataError, DegenerateInputError,  # noqa: E402
                     NonFiniteError, ShapeError)
from .types import (LayerDataset, ModelSpec, CovariatePrior, ParamsConstrained,  # noqa: E402
                    TemplateSet)
from .sampler import SamplerConfig, PosteriorDraws, adapt_and_sample  # noqa: E402
from .gradients import LogPosterior, grad_log_posterior  # noqa: E402
from .simgen import SimConfig, generate  # noqa: E402

__all__ = [
    "BalmError", "ConfigError", "DataError", "DegenerateInputError", "NonFiniteError",
    "ShapeError", "LayerDataset", "ModelSpec", "CovariatePrior", "ParamsConstrained",
    "TemplateSet", "SamplerConfig", "PosteriorDraws", "adapt_and_sample", "LogPosterior",
    "grad_log_posterior", "SimConfig", "generate",
]
