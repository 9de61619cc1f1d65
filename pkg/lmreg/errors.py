"""
Exception hierarchy for lmreg.

Every failure a module can report has its own class. The three families map
onto the command-line exit codes: configuration (2), data (3), numeric (4).
"""

from typing import Optional


class LmregError(Exception):
    """Base class for all lmreg errors"""

    exit_code = 1


class ConfigError(LmregError):
    """Invalid configuration, arguments or hyperparameters"""

    exit_code = 2


class DataError(LmregError):
    """Input files or data structures that cannot be used"""

    exit_code = 3


class NumericError(LmregError):
    """Computation produced a non-finite or non-convergent result"""

    exit_code = 4


# Data errors
class VolumeFormatError(DataError):
    """Malformed or incomplete MetaImage header"""


class VolumeSizeError(DataError):
    """Payload length does not match the declared dimensions"""


class UnsupportedElementTypeError(DataError):
    """ElementType outside MET_SHORT / MET_FLOAT"""


class GridMismatchError(DataError):
    """Two fields or volumes are not defined on the same grid"""


class OutOfBoundsError(DataError):
    """Crop, landmark or slice index outside the volume"""


class OutOfSupportError(DataError):
    """Point outside the support of a B-spline transform"""


class ShapeError(DataError):
    """Tensor shapes do not conform for an operation"""


class GraphError(DataError):
    """Backward called on a disconnected, non-scalar or cyclic graph"""


class DomainError(DataError):
    """Arguments outside the mathematical domain of an operation"""


class CheckpointFormatError(DataError):
    """Checkpoint file with a bad magic string, version or truncated payload"""


class TableFormatError(DataError):
    """Malformed point or correspondence table"""


# Numeric errors
class InversionError(NumericError):
    """Fixed-point inversion of a displacement field did not converge"""

    def __init__(self, message: str, residual: Optional[float] = None):
        super().__init__(message)
        self.residual = residual


class NonFiniteError(NumericError):
    """A loss, metric or objective became NaN or infinite"""


class EmptyOverlapError(NumericError):
    """No sample landed inside the moving image"""


class DegenerateIntensityError(NumericError):
    """Intensity range collapsed to a single value"""


class GradcheckError(NumericError):
    """Analytic gradient disagrees with finite differences"""
