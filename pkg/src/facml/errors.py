"""Exception hierarchy shared by all facml modules."""


class FacmlError(Exception):
    """Base class for every error raised by facml."""


# storage / relational layer
class SchemaError(FacmlError):
    pass


class AlreadyExists(FacmlError):
    pass


class KeyViolation(FacmlError):
    pass


class StorageError(FacmlError):
    pass


class IndexRequired(FacmlError):
    pass


class ReferentialViolation(FacmlError):
    pass


class FormatError(FacmlError):
    """CSV or spec-file parse failure; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# numerical layer
class ShapeError(FacmlError, ValueError):
    pass


class SingularCovariance(FacmlError):
    pass


class StaleCache(FacmlError):
    pass


class EmptyComponent(FacmlError):
    pass


# reporting
class ComparabilityError(FacmlError):
    pass
