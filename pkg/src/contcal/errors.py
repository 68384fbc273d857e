"""Exception types shared across the toolkit."""


class ContcalError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(ContcalError):
    """Operands have incompatible dimensions."""


class DomainError(ContcalError):
    """A value lies outside the domain an operation is defined on."""


class ConfigError(ContcalError):
    """A configuration value is invalid or inconsistent."""


class UsageError(ContcalError):
    """An operation was called in a state or with arguments it does not support."""


class IdxParseError(ContcalError):
    """An IDX file could not be decoded; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
