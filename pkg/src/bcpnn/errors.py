class BcpnnError(Exception):
    """Base class for all engine errors."""


class ConfigError(BcpnnError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config: " + "; ".join(self.violations))


class ShapeError(BcpnnError, ValueError):
    pass


class DomainError(BcpnnError, ValueError):
    pass


class DatasetError(BcpnnError):
    pass


class DatasetNotFound(DatasetError, FileNotFoundError):
    pass


class BadMagic(DatasetError):
    pass


class TruncatedData(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


class LabelError(DatasetError):
    pass


class EmptyDataset(DatasetError, ValueError):
    pass


class ParamFileError(BcpnnError):
    pass


class ParamBadMagic(ParamFileError):
    pass


class UnsupportedVersion(ParamFileError):
    pass


class CrcMismatch(ParamFileError):
    pass


class ParamTruncated(ParamFileError):
    pass


class PipelineError(BcpnnError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause!r}")
