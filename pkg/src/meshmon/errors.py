"""Exception hierarchy shared by all meshmon modules."""


class MeshmonError(Exception):
    """Base class for every error raised by meshmon."""


class ConfigError(MeshmonError, ValueError):
    """A configuration document is malformed or fails validation."""


class ParseError(ConfigError):
    """Syntax error in a text document.

    Carries the 1-based line number when known so the CLI can point at it.
    """

    def __init__(self, reason, lineno=None, key=None):
        self.reason = reason
        self.lineno = lineno
        self.key = key
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{reason}")


class ValidationError(ConfigError):
    """Document parsed but violates a referential or range invariant."""
