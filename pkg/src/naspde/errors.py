"""Exception types used across the package."""


class ConfigurationError(ValueError):
    """Invalid construction parameters or mismatched objects."""


class BackendMismatchError(ConfigurationError):
    """A grid function was used with a family of a different backend/resolution."""


class DomainError(ValueError):
    """Mathematically inadmissible request (e.g. negative power of a singular mode)."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or a solver/quadrature failed."""
