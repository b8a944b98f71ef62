"""Exception hierarchy; the CLI maps these onto its exit-code scheme."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid configuration or invalid operation parameters (exit code 2)."""


class DataError(PipelineError):
    """Problems with input data: catalogs, images, manifests (exit code 3)."""


class CatalogError(DataError):
    """Malformed or inconsistent metadata catalog."""


class IntegrityError(DataError):
    """Contradictory records, e.g. one lesion with two different labels."""


class CheckpointError(PipelineError):
    """Unreadable, corrupt, or incompatible model checkpoint."""


class TrainingError(PipelineError):
    """Training aborted (e.g. non-finite loss)."""
