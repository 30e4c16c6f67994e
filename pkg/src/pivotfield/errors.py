"""Exception types shared across the package."""


class PivotFieldError(Exception):
    """Base class for all package-specific errors."""


class NonConvergence(PivotFieldError):
    """Newton iteration failed to converge within the iteration budget."""

    def __init__(self, message, residual_norm=None, iterations=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations


class SectorMismatch(PivotFieldError):
    """A measurement batch was appended to a sector it does not belong to."""


class DegenerateScaling(PivotFieldError):
    """Sensitivity scaling requested with near-zero observation values."""


class TooFewSamples(PivotFieldError):
    """Variogram fitting needs at least five sample points."""


class SingularSystem(PivotFieldError):
    """The kriging system is singular (duplicate points or degenerate variogram)."""


class MissingWeather(PivotFieldError):
    """The weather series does not cover the requested simulation horizon."""


class DegenerateRange(PivotFieldError):
    """NRMSE normalization impossible: validation set has zero value range."""


class ConfigError(PivotFieldError):
    """Experiment configuration is invalid or incomplete."""


class DataError(PivotFieldError):
    """Input data files are malformed or empty."""
