"""Exception types shared across the package."""


class DefectSSLError(Exception):
    """Base class for all package errors."""


class ParameterError(DefectSSLError, ValueError):
    """An operation was called with an invalid parameter."""


class InputError(DefectSSLError, ValueError):
    """Input data does not satisfy an operation's preconditions."""


class LabelError(InputError):
    """An annotation names a class that is not in the label map."""


class AnnotationParseError(InputError):
    """Annotation XML could not be parsed."""


class DegenerateClassError(InputError):
    """A class has no samples, or its embeddings cancel out."""


class DegenerateEmbeddingError(InputError):
    """A feature embedding has (numerically) zero norm."""


class SpecError(DefectSSLError, ValueError):
    """A network description is inconsistent."""


class FormatError(DefectSSLError):
    """A persisted file is malformed or does not match expectations."""


class ConfigError(DefectSSLError):
    """A run configuration is missing or invalid."""
