# -*- coding: UTF-8 -*-


class DimensionError(ValueError):
    """Tensor shapes do not satisfy an op's contract."""


class ContractError(ValueError):
    """A caller broke a documented precondition."""


class AllocationError(ValueError):
    """The requested query-head allocation is infeasible."""


class ConversionError(ValueError):
    """A checkpoint cannot be converted to the requested grouping."""


class ValidationError(ValueError):
    """Conflicting or out-of-range configuration."""


class DatasetFormatError(ValueError):
    def __init__(self, path, offset, message):
        self.path = path
        self.offset = offset
        super().__init__("{} (file {}, byte offset {})".format(message, path, offset))


class CheckpointFormatError(ValueError):
    """Malformed .gqac container."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, metrics):
        self.step = step
        self.metrics = metrics
        super().__init__("Non-finite loss at step {}".format(step))
