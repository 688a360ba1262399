"""Exception types shared across the package."""


class ConfigError(ValueError):
    """An environment, strategy or run configuration is invalid."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ResourceError(RuntimeError):
    """A brute-force search would exceed its size cap."""


class UndefinedStatisticError(ValueError):
    """A statistic is undefined for the supplied data (empty set, constant input)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite parameter or loss."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class ParseError(ValueError):
    """A persisted record could not be decoded."""

    def __init__(self, message, line=None, key=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if key is not None:
            loc.append(f"key {key!r}")
        super().__init__(f"{', '.join(loc)}: {message}" if loc else message)
        self.line = line
        self.key = key
