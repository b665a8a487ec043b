"""Exception types shared across the package."""


class EnsError(Exception):
    """Base class for all package errors."""


class CapacityError(EnsError, ValueError):
    """Requested size exceeds an implementation cap."""


class TopologyError(EnsError, ValueError):
    """Mesh connectivity violates a manifold/closedness precondition."""


class ObjParseError(EnsError, ValueError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ConfigurationError(EnsError, ValueError):
    """Inconsistent model/encoder/network configuration."""


class NumericError(EnsError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class NonFiniteLossError(NumericError):
    def __init__(self, component, value):
        self.component = component
        self.value = value
        super().__init__(f"loss component {component!r} is non-finite ({value})")


class DivergenceError(EnsError, RuntimeError):
    """Training loss diverged; carries the path of the diagnostic dump."""

    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message)


class VersionError(EnsError, ValueError):
    """File format or checkpoint/encoder version mismatch."""


class DatasetError(EnsError, IOError):
    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")
