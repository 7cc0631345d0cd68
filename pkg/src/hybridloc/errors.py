"""Exception types shared across the package.

Each carries a short machine-readable ``category`` so the CLI can map
failures to stable exit codes and error strings.
"""


class HybridLocError(Exception):
    category = "error"


class ConfigError(HybridLocError):
    """Bad or unknown configuration keys/values."""

    category = "config"


class FormatError(HybridLocError):
    """Corrupt artifact file or schema-version mismatch."""

    category = "format"


class InvalidArgumentError(HybridLocError, ValueError):
    """Caller violated an operation precondition."""

    category = "invalid-argument"


class InvalidStateError(HybridLocError, RuntimeError):
    """Operation requires state the object does not have (e.g. untrained model)."""

    category = "invalid-state"


class NumericalError(HybridLocError, RuntimeError):
    """Linear algebra failed beyond jitter rescue."""

    category = "numerical"


class OutOfBoundsError(HybridLocError, ValueError):
    """Pose or trajectory leaves the world bounds."""

    category = "out-of-bounds"


class DegenerateWeightsError(HybridLocError, RuntimeError):
    """All particle weights collapsed to zero; the filter needs a reset."""

    category = "degenerate"


class CannotInitialiseError(HybridLocError, RuntimeError):
    """Empty belief and no seed distribution to draw from."""

    category = "cannot-initialise"
