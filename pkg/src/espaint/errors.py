"""Exception taxonomy shared by every module.

The CLI maps these onto exit codes: parameter/config problems -> 2,
data/file problems -> 3, numeric failures -> 4.
"""


class EspaintError(Exception):
    """Base class for all package errors."""


class DimensionError(EspaintError):
    """Shapes or sizes of inputs do not line up."""


class ParameterError(EspaintError):
    """A configuration value or argument is invalid or infeasible."""


class PaletteError(EspaintError):
    """A label map or color does not agree with the active palette."""


class UnknownColorError(PaletteError):
    """Pixels whose color is farther than the tolerance from every palette entry.

    ``coordinates`` holds up to the first 16 offending (row, col) pairs.
    """

    def __init__(self, message, coordinates):
        super().__init__(message)
        self.coordinates = list(coordinates)


class MaskGenerationError(EspaintError):
    """Random mask generation could not satisfy its coverage constraint."""


class ContractError(EspaintError):
    """A pluggable component violated its interface contract."""


class CheckpointError(EspaintError):
    """A checkpoint file is corrupt, version-skewed, or shape-incompatible."""


class DataError(EspaintError):
    """Dataset files are missing, empty, or unreadable."""


class NumericError(EspaintError):
    """Training produced a non-finite loss or another numeric failure."""


class SessionNotFoundError(EspaintError):
    """The requested interactive session does not exist (or has expired)."""
