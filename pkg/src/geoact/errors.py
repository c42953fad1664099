"""Exception hierarchy. CLI exit codes hang off these classes."""


class GeoActError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class InvalidInputError(GeoActError, ValueError):
    """Non-finite or out-of-range input values."""


class DegenerateBearingError(GeoActError, ValueError):
    """Bearing requested between two coincident points."""


class ResolutionError(GeoActError, ValueError):
    """Grid resolution outside the family's supported range."""


class CellParseError(GeoActError, ValueError):
    """Malformed cell token."""


class NoParentError(GeoActError, ValueError):
    """Parent requested for a top-level cell."""


class IngestQualityError(GeoActError):
    exit_code = 2


class EmptyDatasetError(GeoActError):
    exit_code = 2


class TaxonomyError(GeoActError):
    exit_code = 2


class EmptyStatsError(GeoActError, ValueError):
    pass


class DimensionError(GeoActError, ValueError):
    """Feature dimensionality or fingerprint mismatch."""


class InvalidHyperparameterError(GeoActError, ValueError):
    pass


class TrainingDivergedError(GeoActError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class BudgetExhaustedError(GeoActError):
    pass


class MissingArtifactError(GeoActError, FileNotFoundError):
    exit_code = 2
