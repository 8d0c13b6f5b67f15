"""Exception hierarchy shared across the package."""


class Eq4dError(Exception):
    pass


class InvalidArgument(Eq4dError, ValueError):
    pass


class InvalidInput(Eq4dError, ValueError):
    pass


class InvalidState(Eq4dError, RuntimeError):
    pass


class DegenerateDirection(Eq4dError, ValueError):
    """Raised when a vector has no horizontal component, so no heading exists."""


class MalformedScan(Eq4dError, ValueError):
    pass


class CountMismatch(Eq4dError, ValueError):
    pass


class KernelAsymmetry(Eq4dError, RuntimeError):
    """Kernel points are not closed under the group rotations."""


class NumericFailure(Eq4dError, FloatingPointError):
    def __init__(self, node: str, message: str | None = None):
        self.node = node
        super().__init__(message or f"non-finite value first produced at node {node!r}")


class InvalidConfig(Eq4dError, ValueError):
    pass


class SchemaError(Eq4dError, ValueError):
    pass
