from __future__ import annotations


class SidError(Exception):
    """Base class for every error raised by this package."""


class DecodeError(SidError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(SidError):
    pass


class EmptyPairError(SidError):
    """No in-bounds pixel pair exists for a co-occurrence offset."""


class ParameterError(SidError):
    pass


class DegenerateClassError(SidError):
    pass


class BackendLoadError(SidError):
    pass


class VersionError(SidError):
    pass


class ContractViolationError(SidError):
    pass


class EmptyDatasetError(SidError):
    pass


class ManifestError(SidError):
    pass


class UndefinedRecallError(SidError):
    pass


class ConfigError(SidError):
    pass
