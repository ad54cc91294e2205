class MadprError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MadprError, ValueError):
    """Bad user input: arguments, configuration, or data that violates an invariant."""


class FormatError(ValidationError):
    """A file does not match its on-disk format."""


class ConvergenceError(MadprError):
    """The eigensolver hit its iteration budget before reaching tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (achieved residual {residual:.3e})")
        self.residual = residual


class DisconnectedGraphError(MadprError):
    def __init__(self, n_components: int, k: int | None = None):
        hint = f"; rebuild with a larger k (currently {k})" if k is not None else "; rebuild with a larger k"
        super().__init__(f"graph has {n_components} connected components{hint}")
        self.n_components = n_components


class StaleArtifactError(MadprError):
    """An on-disk artifact was produced from different inputs or settings."""
