"""Exception types shared across the package, mapped to CLI exit codes."""


class PromptSegError(Exception):
    """Base class for all package errors."""


class DimensionError(PromptSegError):
    """Shapes of operands do not satisfy an operation's contract."""


class NumericError(PromptSegError):
    """A NaN/Inf appeared, or a value left the domain of an operation."""


class ContractError(PromptSegError):
    """A precondition other than shape or numeric range was violated."""


class ConfigError(PromptSegError):
    """Invalid configuration value, unknown key, or inconsistent setup."""


class TokenLookupError(PromptSegError):
    """A token is not present in the vocabulary."""


class GenerationError(PromptSegError):
    """Scene synthesis failed (e.g. placement retries exhausted)."""


class ChecksumError(PromptSegError):
    """A checkpoint file failed its integrity check."""


class DegenerateInputError(PromptSegError):
    """An input is too degenerate to define the result (e.g. empty mask)."""


# CLI exit codes: 0 ok, 2 config error, 3 I/O error, 4 checksum error,
# 5 numeric divergence.
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECKSUM = 4
EXIT_NUMERIC = 5
