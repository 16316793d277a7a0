"""Exception hierarchy; ``category`` is what the CLI prints on stderr."""


class CuratorError(Exception):
    category = "error"


class ParseError(CuratorError):
    category = "parse"


class ValidationError(CuratorError, ValueError):
    category = "validation"


class StateError(CuratorError):
    category = "state"


class LockError(CuratorError):
    category = "lock"
