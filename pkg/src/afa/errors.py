"""Exception hierarchy. The CLI maps these onto exit codes."""


class ContractError(ValueError):
    """A precondition or protocol rule was violated (exit code 1)."""


class ShapeError(ContractError):
    pass


class FrozenParameterError(ContractError):
    """Attempted update of a frozen router, expert, or backbone tensor."""


class FormatError(Exception):
    """Unreadable or malformed file (exit code 2)."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass
