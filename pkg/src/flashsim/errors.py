"""Exception types shared across the package."""


class FlashSimError(Exception):
    """Base class for all flashsim errors."""


class NotHermitianError(FlashSimError):
    """Matrix expected Hermitian is not, beyond tolerance."""


class NotPositiveError(FlashSimError):
    """Operator has an eigenvalue below the negativity tolerance."""


class ExponentOverflowError(FlashSimError):
    """||G t|| exceeds the documented stability bound of the exponential."""


class DimensionOverflowError(FlashSimError):
    """A constructed space would exceed the dimension cap."""


class BadProfileError(FlashSimError):
    """Rate profile parameters are not strictly positive and finite."""


class EmptySectorError(FlashSimError):
    """Requested antisymmetric sector has dimension zero."""


class LatticeMismatchError(FlashSimError):
    """Models being composed live on different lattices."""


class NegativeTimeError(FlashSimError):
    """Propagation over a negative duration was requested."""


class NonMonotoneHistoryError(FlashSimError):
    """Flash history times are not strictly increasing from the start time."""


class NotNormalizedError(FlashSimError):
    """State vector norm differs from 1 beyond tolerance."""


class ZeroNormError(FlashSimError):
    """A vector that must be normalizable has vanishing norm."""


class ZeroProbabilityFlashError(ZeroNormError):
    """Collapse requested at a site whose rate vanishes on this state."""


class ZeroTotalRateError(FlashSimError):
    """Total flash rate vanished where a site draw was required."""


class TableTooLargeError(FlashSimError):
    """Requested joint density table exceeds the entry cap."""


class StepTooLargeError(FlashSimError):
    """Fixed integrator step is outside the stability region."""


class ReducedStateMismatchError(FlashSimError):
    """Joint states fed to the no-signalling check have different marginals."""


class BasisMismatchError(FlashSimError):
    """Graded bases of the two second-quantization routes do not line up."""


class ConfigError(FlashSimError):
    """Base class for experiment configuration errors."""


class ConfigParseError(ConfigError):
    """Configuration file is not syntactically valid."""


class ConfigValidationError(ConfigError):
    """Configuration file is well-formed but semantically invalid."""
