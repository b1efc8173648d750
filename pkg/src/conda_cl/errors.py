"""Exception hierarchy shared by every module in the package."""


class CondaError(Exception):
    """Base class for all domain errors raised by the package."""


class BadShape(CondaError):
    pass


class DuplicateParam(CondaError):
    pass


class DomainError(CondaError):
    pass


class BadConfig(CondaError):
    pass


class SingularMix(CondaError):
    pass


class BadLabel(CondaError):
    pass


class BadBatch(CondaError):
    pass


class EmptyLoss(CondaError):
    pass


class InfiniteKL(CondaError):
    pass


class EmptyMetric(CondaError):
    pass


class IncompleteRecords(CondaError):
    pass


class WriteError(CondaError):
    pass


class GenerationFailure(CondaError):
    pass


class CorruptDataset(CondaError):
    pass


class CorruptCheckpoint(CondaError):
    pass


class MissingArtifact(CondaError):
    pass


class ConfigError(CondaError):
    def __init__(self, key_path, message):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class AccessDenied(CondaError):
    def __init__(self, stage, domain, split):
        self.stage = stage
        self.domain = domain
        self.split = split
        super().__init__(
            f"training read of ({domain}, {split}) is not permitted at stage {stage}"
        )
