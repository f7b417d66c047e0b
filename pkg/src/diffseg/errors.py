"""Exception hierarchy shared by every stage of the pipeline."""


class DiffSegError(Exception):
    """Base class. ``kind`` is the machine-readable tag the CLI prints."""

    kind = "error"


class ConfigError(DiffSegError, ValueError):
    kind = "config"


class InputError(DiffSegError, ValueError):
    kind = "input"


class ModelError(DiffSegError):
    kind = "model"


class TrainingError(DiffSegError, FloatingPointError):
    kind = "training"


class DataError(DiffSegError, ValueError):
    kind = "data"
