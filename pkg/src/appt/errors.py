"""Exception hierarchy shared by every module.

The CLI maps each family to an exit code: contract/integrity/property
failures exit 1, configuration errors exit 2, I/O and format errors exit 3.
"""


class APPTError(Exception):
    exit_code = 1


class ContractError(APPTError):
    """A precondition or postcondition of an operation was violated."""


class DimensionError(ContractError):
    pass


class NonFiniteError(ContractError):
    pass


class IntegrityError(ContractError):
    """Frozen parameters changed, or the parameter partition is broken."""


class HarnessError(ContractError):
    """The finite-difference harness observed non-deterministic evaluation."""


class ConfigError(APPTError):
    exit_code = 2


class FormatError(APPTError):
    exit_code = 3


class ParseError(FormatError):
    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class CheckpointError(FormatError):
    def __init__(self, message, tensor=None):
        self.tensor = tensor
        if tensor is not None:
            message = f"tensor {tensor!r}: {message}"
        super().__init__(message)
