"""Model-based clustering of three-way count data with mixtures of matrix variate
Poisson-log normal distributions, fitted by MCMC-EM."""

from .diagnostics import check_chains, ess, heidelberger_welch, psrf
from .em import EMConfig, MixtureFit, fit_mixture, normalize_identifiability
from .errors import (
    ConvergenceError,
    DataError,
    DegenerateComponentError,
    FitFailure,
    MVPLNError,
    NotPositiveDefiniteError,
    SamplerError,
    SpecError,
)
from .initialization import InitSpec, initialize, kmeans_init, random_init
from .matnorm import MatNormParams
from .mvpln import mvpln_moments, unit_log_likelihood
from .pipeline import RunConfig, run_fit, run_sim
from .sampler import ChainConfig, ChainSet, sample_latent
from .selection import SelectionTable, ari, count_free_params, criteria, select
from .simgen import SimSpec, generate, preset, random_spd
from .tensor_io import CountTensor, LibrarySizes, compute_library_sizes, load_counts

__version__ = "0.1.0"

__all__ = [
    "ChainConfig", "ChainSet", "ConvergenceError", "CountTensor", "DataError",
    "DegenerateComponentError", "EMConfig", "FitFailure", "InitSpec", "LibrarySizes",
    "MVPLNError", "MatNormParams", "MixtureFit", "NotPositiveDefiniteError", "RunConfig",
    "SamplerError", "SelectionTable", "SimSpec", "SpecError", "ari", "check_chains",
    "compute_library_sizes", "count_free_params", "criteria", "ess", "fit_mixture",
    "generate", "heidelberger_welch", "initialize", "kmeans_init", "load_counts",
    "mvpln_moments", "normalize_identifiability", "preset", "psrf", "random_init",
    "random_spd", "run_fit", "run_sim", "sample_latent", "select", "unit_log_likelihood",
]
