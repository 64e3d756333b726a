"""Exception types raised across the package."""


class VMFCompError(Exception):
    """Base class for all package errors."""


class ZeroFeatureVector(VMFCompError):
    pass


class ZeroKernel(VMFCompError):
    pass


class DimensionMismatch(VMFCompError, ValueError):
    pass


class ShapeMismatch(VMFCompError, ValueError):
    pass


class DegenerateActivation(VMFCompError):
    pass


class MissingStopGradient(VMFCompError):
    """A pseudo label still carries an autograd history."""


class SettingMismatch(VMFCompError):
    pass


class EmptyDataset(VMFCompError):
    pass


class NonFiniteLoss(VMFCompError):
    def __init__(self, message, batch_id=None, iteration=None, terms=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.iteration = iteration
        self.terms = terms or {}


class InvalidFraction(VMFCompError, ValueError):
    pass


class CorruptFile(VMFCompError):
    pass


class MissingField(VMFCompError):
    pass


class IncompatibleCheckpoint(VMFCompError):
    pass


class NoMatchedChannel(VMFCompError):
    pass


class FactorOutOfBounds(VMFCompError):
    pass


class EmptyFactorSet(VMFCompError):
    pass


class MissingSample(VMFCompError):
    pass


class ConfigError(VMFCompError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
