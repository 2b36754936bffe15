"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are not conformable."""


class ParameterError(ValueError):
    """An operation argument is outside its admissible range."""


class ConfigError(ParameterError):
    """A configuration value violates its invariants."""


class ContractError(RuntimeError):
    """A call violated an API precondition (e.g. backward on a non-scalar)."""


class GatherIndexError(IndexError):
    """An index tensor addresses a position outside the gathered axis."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. empty surface)."""


class FitError(ValueError):
    """Ellipse fitting failed on degenerate input."""


class BiometryError(ValueError):
    """A biometric quantity cannot be computed (missing structure)."""


class DegenerateGeometryError(BiometryError):
    """The geometric construction has no solution (e.g. point inside the head ellipse)."""


class FormatError(ValueError):
    """A serialized file is corrupt or has an unsupported layout."""


class DataError(ValueError):
    """Dataset files are missing, unpaired or have unexpected extents."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
