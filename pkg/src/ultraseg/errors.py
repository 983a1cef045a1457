"""Exception hierarchy shared by every ultraseg module."""


class UltrasegError(Exception):
    """Base class for all engine errors."""


class ShapeError(UltrasegError, ValueError):
    pass


class GeometryError(ShapeError):
    """Spatial arithmetic yields an invalid (odd or non-positive) size."""


class DivisibilityError(ShapeError):
    pass


class ContractError(UltrasegError, RuntimeError):
    """A caller violated an operation precondition."""


class ConfigError(UltrasegError, ValueError):
    pass


class DegenerateBatchError(ContractError):
    pass


class NumericalError(UltrasegError, ArithmeticError):
    pass


class DataError(UltrasegError):
    """Dataset ingestion or pairing failure."""


class IngestionError(DataError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class UnreadableFileError(IngestionError):
    pass


class UndecodableImageError(IngestionError):
    pass


class EmptyImageError(IngestionError):
    pass


class PairingError(DataError):
    def __init__(self, sample_id, reason="missing counterpart"):
        super().__init__(f"sample {sample_id!r}: {reason}")
        self.sample_id = sample_id


class CheckpointError(UltrasegError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass
