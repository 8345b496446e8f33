"""Exception types shared across the package."""


class ClgError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(ClgError):
    pass


class NotPSD(ClgError):
    """A matrix required to be positive semidefinite is not."""


class SingularCovariance(ClgError):
    pass


class SingularInnovation(ClgError):
    pass


class QNotPD(ClgError):
    """Nonlinear-state process noise covariance G Gᵀ is not positive definite."""


class RNotPD(ClgError):
    """Measurement noise covariance is not positive definite."""


class RDegenerate(ClgError):
    """Synthesized measurement noise covariance is not positive definite."""


class SigmaSingular(ClgError):
    """Anchor-prior covariance cannot be inverted."""


class NonFiniteJacobian(ClgError):
    pass


class ModelInvalid(ClgError):
    """Raised when model validation reports violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("model validation failed: " + "; ".join(self.violations))


class DegenerateWeights(ClgError):
    """All resampling weights are zero or non-finite."""


class AllWeightsZero(ClgError):
    """All particle weights underflowed; carries the offending log-weights.

    Attributes
    ----------
    log_weights : ndarray or None
        The unnormalized log-weights that triggered the failure, for
        post-mortem dumps.
    """

    def __init__(self, message, log_weights=None):
        super().__init__(message)
        self.log_weights = log_weights
