"""Exception types raised across the package."""


class RoutelabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RoutelabError, ValueError):
    pass


class InvalidConfigError(RoutelabError, ValueError):
    pass


class InvalidRouteError(RoutelabError, ValueError):
    pass


class OracleFailureError(RoutelabError):
    """A finite-difference oracle produced a non-finite value."""

    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


class TraceMismatchError(RoutelabError):
    """A forward trace was used with parameters other than the ones that produced it."""


class CorruptCheckpointError(RoutelabError):
    pass


class NonFiniteLossError(RoutelabError):
    """Training hit a non-finite loss; ``record`` holds the offending step's diagnostics."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


class InternalInvariantError(RoutelabError):
    pass
