"""Exception hierarchy shared by all modules."""


class MVPLNError(Exception):
    """Base class for every error raised by this package."""


class DataError(MVPLNError):
    """Malformed or invalid input data."""


class NotPositiveDefiniteError(MVPLNError):
    """A covariance matrix failed the Cholesky / conditioning check."""


class SamplerError(MVPLNError):
    """The latent-variable sampler broke down (e.g. acceptance collapsed)."""


class DegenerateComponentError(MVPLNError):
    """A mixture component lost (almost) all of its units."""


class ConvergenceError(MVPLNError):
    """An inner numerical solver failed to converge."""


class SpecError(MVPLNError):
    """An invalid simulation or run specification."""


class FitFailure(MVPLNError):
    """Every requested model failed to fit."""
