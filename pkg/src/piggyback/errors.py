"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems are usage
errors (1), data/format/binding problems are data errors (2), and
divergence is a training error (3).
"""


class PiggybackError(Exception):
    pass


class DimensionError(PiggybackError, ValueError):
    pass


class ConfigError(PiggybackError, ValueError):
    pass


class DegenerateWeightsError(PiggybackError, ValueError):
    pass


class DegenerateBatchError(PiggybackError, ValueError):
    pass


class DataError(PiggybackError, ValueError):
    pass


class FormatError(DataError):
    """Malformed or truncated file. ``section`` names the offending part."""

    def __init__(self, message, section=None):
        if section is not None:
            message = f"{message} (section: {section})"
        super().__init__(message)
        self.section = section


class EncodingError(DataError):
    pass


class BindingError(DataError):
    """Task artifact does not belong to the backbone it is applied to."""


class TrainingError(PiggybackError, RuntimeError):
    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} at epoch {epoch}"
        super().__init__(message)
        self.epoch = epoch
