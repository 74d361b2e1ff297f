"""Exception hierarchy shared by every module of the package."""


class CCSError(Exception):
    """Base class for all errors raised by ccspred."""


class DimensionError(CCSError, ValueError):
    pass


class NonFiniteError(CCSError, FloatingPointError):
    pass


class OutOfVocabularyError(CCSError, KeyError):
    """A categorical value (or index) outside the fitted vocabulary."""

    def __init__(self, value, feature=None):
        self.value = value
        self.feature = feature
        where = f" for feature {feature!r}" if feature is not None else ""
        super().__init__(f"out-of-vocabulary value {value!r}{where}")

    def __str__(self):
        return self.args[0]


class SchemaError(CCSError, ValueError):
    pass


class IncompatibleSchemaError(SchemaError):
    pass


class EmptyDatasetError(CCSError, ValueError):
    pass


class ConstantColumnError(CCSError, ValueError):
    pass


class ConfigError(CCSError, ValueError):
    pass


class SolverError(CCSError, ArithmeticError):
    pass


class TrainingDivergedError(CCSError, FloatingPointError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")


class UndefinedMetricError(CCSError, ValueError):
    pass


class FormatError(CCSError, ValueError):
    """Malformed or corrupted model container."""
