"""Exception hierarchy shared by every module of the solver."""


class NNRKError(Exception):
    """Base class for all solver errors."""


class ConfigError(NNRKError):
    """Invalid or incomplete run configuration.

    ``path`` is the dotted location of the offending field when known.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class GeometryError(NNRKError):
    """Unsupported or invalid domain geometry."""


class MeshGenerationError(NNRKError):
    """Smoothing-cell construction produced an unusable cell."""

    def __init__(self, message: str, node: int | None = None):
        self.node = node
        super().__init__(message if node is None else f"node {node}: {message}")


class SingularMomentError(NNRKError):
    """Moment matrix is singular or too ill-conditioned at a point."""

    def __init__(self, point, condition: float):
        self.point = tuple(float(v) for v in point)
        self.condition = condition
        super().__init__(
            f"moment matrix at x={self.point} has condition number {condition:.3e}; "
            "not enough nodes cover this point"
        )


class DimensionError(NNRKError):
    """Array length does not match the operator it is applied to."""


class NonFiniteLossError(NNRKError):
    """Loss evaluation produced NaN or Inf."""

    def __init__(self, message: str, cell: int | None = None):
        self.cell = cell
        super().__init__(message if cell is None else f"{message} (cell {cell})")


class OptimizerAbort(NNRKError):
    """Optimizer produced a non-finite step and cannot continue."""


class SingularSystemError(NNRKError):
    """Stage-A linear system is singular (unconstrained rigid modes)."""


class CheckpointError(NNRKError):
    """Checkpoint file is missing, corrupt or of an unknown version."""
