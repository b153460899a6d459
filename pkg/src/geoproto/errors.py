"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GeoProtoError(Exception):
    exit_code = 1


class ConfigError(GeoProtoError, ValueError):
    exit_code = 2


class DataError(GeoProtoError, ValueError):
    exit_code = 3


class InsufficientDataError(DataError):
    pass


class CacheCorruptError(DataError):
    pass


class TrainingDivergedError(GeoProtoError, RuntimeError):
    exit_code = 4

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class IncompatibleError(GeoProtoError):
    exit_code = 5
