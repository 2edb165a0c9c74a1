"""Exception hierarchy shared across the toolkit."""


class GeoConvError(Exception):
    """Base class for all toolkit errors."""


class MeshError(GeoConvError):
    """Invalid mesh topology or degenerate geometry."""


class FormatError(GeoConvError):
    """Malformed, truncated or mislabeled binary/text file."""


class VersionError(FormatError):
    """File carries a recognized magic but an unsupported version."""


class UnsupportedFaceError(FormatError):
    """OBJ face record with other than three vertices."""


class DimensionError(GeoConvError):
    """Coefficient or tensor dimensions disagree with the model."""


class SolverError(GeoConvError):
    """Iterative solve failed to converge."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class PrecomputeError(GeoConvError):
    """A geodesic field needed for weight compilation is missing."""


class NoCorrespondenceError(GeoConvError):
    """Pixel carries no surface correspondence."""


class ArchitectureError(GeoConvError):
    """Network/layer description outside the supported algebra."""


class DegenerateClassError(GeoConvError):
    """A label column is all-positive or all-negative."""


class TrainingError(GeoConvError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(GeoConvError):
    """Configuration file or override violates the schema."""
