"""Posterior-matching laboratory on Gaussian-mixture inverse problems.

Every quantity (diffused scores, exact posteriors, Fisher integrals, biased
fixed points of the baselines) has a closed form here, so each solver can be
checked against an exact oracle.
"""

from ppmlab.diffusion import VpSchedule, alpha_sigma, conditional_score, perturb, sample_time
from ppmlab.problems import (
    GaussianMixture,
    LinearGaussianProblem,
    LinearOperator,
    analytic_posterior,
    diffuse_gmm,
    gmm_log_density,
    gmm_sample,
    simulate_observation,
)

__version__ = "0.1.0"

__all__ = [
    "VpSchedule",
    "alpha_sigma",
    "conditional_score",
    "perturb",
    "sample_time",
    "GaussianMixture",
    "LinearGaussianProblem",
    "LinearOperator",
    "analytic_posterior",
    "diffuse_gmm",
    "gmm_log_density",
    "gmm_sample",
    "simulate_observation",
]
