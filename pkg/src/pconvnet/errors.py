"""Exception types shared across the package."""


class PConvError(Exception):
    """Base class for every error raised by pconvnet."""


class DimensionError(PConvError, ValueError):
    """Tensor or image extents are incompatible with an operation."""


class ContractError(PConvError, ValueError):
    """An input violates an operation's precondition."""


class NumericalError(PConvError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class DegenerateInputError(PConvError, ValueError):
    """Input has no spread (constant image, zero variance)."""


class ConfigError(PConvError, ValueError):
    """A configuration is invalid. ``violations`` lists every problem found."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ConfigMismatchError(PConvError, ValueError):
    """A checkpoint was produced for a different model configuration."""


class MaskGenerationError(PConvError, RuntimeError):
    """Random mask synthesis could not satisfy the requested coverage."""


class FormatError(PConvError, ValueError):
    """Base class for binary file decoding problems."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class InvalidHeaderError(FormatError):
    pass
