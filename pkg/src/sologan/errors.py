"""Exception types raised across the package."""


class SoloGANError(Exception):
    pass


class InvalidLabelError(SoloGANError, ValueError):
    def __init__(self, y, n):
        super().__init__(f"invalid domain label {y!r}: expected 0 <= y < {n}")
        self.y = y
        self.n = n


class DimensionError(SoloGANError, ValueError):
    pass


class ShapeError(DimensionError):
    pass


class DegenerateVarianceError(SoloGANError, ValueError):
    pass


class ConfigurationError(SoloGANError, ValueError):
    pass


class DatasetError(SoloGANError):
    pass


class DecodeError(DatasetError):
    pass


class ProtocolError(SoloGANError, ValueError):
    pass


class TrainingDivergenceError(SoloGANError, RuntimeError):
    def __init__(self, step, term, value):
        super().__init__(f"loss term {term!r} is {value} at step {step}")
        self.step = step
        self.term = term


class CheckpointError(SoloGANError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass
