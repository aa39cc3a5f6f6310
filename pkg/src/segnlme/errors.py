"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`SegNLMEError`, so callers (and the CLI) can map them to exit codes.
"""


class SegNLMEError(Exception):
    """Base class for all package errors."""


class ParameterError(SegNLMEError, ValueError):
    """A model parameter is outside its admissible range."""


class DomainError(SegNLMEError, ArithmeticError):
    """The mean function produced a non-finite value."""

    def __init__(self, message, latent=None):
        super().__init__(message)
        self.latent = latent


class StateError(SegNLMEError):
    """Latent state is incomplete, e.g. a censored record lacks an imputation."""


class SamplingStallError(SegNLMEError):
    """The rejection sampler exceeded its attempt budget."""

    def __init__(self, subject_id, block, attempts):
        super().__init__(
            f"rejection sampler stalled for subject {subject_id!r}, block "
            f"{block!r} after {attempts} attempts"
        )
        self.subject_id = subject_id
        self.block = block
        self.attempts = attempts


class DegenerateSampleError(SegNLMEError):
    """Too few subjects (or identical subjects) to estimate a parameter."""


class SingularCovarianceError(SegNLMEError):
    """An M-step covariance estimate is singular.

    ``tags`` names the offending components (``"tau"``, ``"A"``, ``"B"``,
    ``"sigma_e2"``) and ``theta`` carries the estimate itself.
    """

    def __init__(self, tags, theta):
        super().__init__(f"singular covariance estimate for {', '.join(tags)}")
        self.tags = tuple(tags)
        self.theta = theta


class DivergenceError(SegNLMEError):
    """The StEM chain produced a non-finite parameter."""

    def __init__(self, iteration, coordinate):
        super().__init__(
            f"non-finite parameter {coordinate!r} at iteration {iteration}"
        )
        self.iteration = iteration
        self.coordinate = coordinate


class ConfigurationError(SegNLMEError, ValueError):
    """Invalid run configuration."""


class DataError(SegNLMEError, ValueError):
    """Malformed input data."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InputError(SegNLMEError, ValueError):
    """An argument is structurally invalid (too short, out of range, ...)."""
