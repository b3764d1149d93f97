from napsumq.inference.laplace import LaplaceApprox, OptimizationError, laplace_fit
from napsumq.inference.nuts import NUTSConfig, PosteriorSamples, nuts_sample, sample_nuts
from napsumq.inference.posterior import NoiseAwarePosterior, log_density

__all__ = [
    "LaplaceApprox",
    "NUTSConfig",
    "NoiseAwarePosterior",
    "OptimizationError",
    "PosteriorSamples",
    "laplace_fit",
    "log_density",
    "nuts_sample",
    "sample_nuts",
]
