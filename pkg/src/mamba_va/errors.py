"""Exception types shared across the package."""


class MambaVAError(Exception):
    """Base class for all package errors."""


class ShapeError(MambaVAError, ValueError):
    pass


class EmptyInputError(MambaVAError, ValueError):
    pass


class ConfigError(MambaVAError, ValueError):
    pass


class FormatError(MambaVAError, ValueError):
    """A file could not be parsed."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class AnnotationParseError(FormatError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class InsufficientDataError(MambaVAError, ValueError):
    pass


class DegenerateBatchError(MambaVAError):
    """Raised by the loss when a batch has no usable target variance."""


class NonFiniteGradientError(MambaVAError, FloatingPointError):
    def __init__(self, name, message=None):
        super().__init__(message or f"non-finite gradient in tensor {name!r}")
        self.name = name
