"""Exception hierarchy shared by every module."""


class MoECacheError(Exception):
    pass


class InvalidLogits(MoECacheError, ValueError):
    pass


class InvalidParam(MoECacheError, ValueError):
    pass


class InvalidSubset(MoECacheError, ValueError):
    pass


class InvalidExpert(MoECacheError, IndexError):
    pass


class EmptyCache(MoECacheError):
    pass


class TooLarge(MoECacheError, ValueError):
    pass


class FormatError(MoECacheError, ValueError):
    """Raised for malformed trace files; carries the offending offset or line."""

    def __init__(self, message, offset=None, line=None):
        where = ""
        if offset is not None:
            where = f" (at byte {offset})"
        elif line is not None:
            where = f" (at line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class ConfigError(MoECacheError, ValueError):
    pass


class UnsupportedCombination(ConfigError):
    pass


class EmptyReport(MoECacheError, ValueError):
    pass
