"""Exception hierarchy shared across the toolkit."""


class AuditError(Exception):
    pass


class IngestError(AuditError):
    pass


class ToolUnavailable(IngestError):
    """The external dissector (or the capture itself) could not be opened."""


class DissectFailed(IngestError):
    def __init__(self, message: str, stderr: str = ""):
        super().__init__(message)
        self.stderr = stderr


class RecordFormatError(IngestError):
    pass


class ParseError(AuditError):
    pass


class Truncated(ParseError):
    pass


class Unsupported(ParseError):
    pass


class DomainError(AuditError, ValueError):
    """Input outside the mathematical domain of an operation."""


class AssignmentError(AuditError, ValueError):
    pass


class OcclusionError(AuditError, ValueError):
    pass


class StageError(AuditError):
    pass


class ConfigError(AuditError):
    pass
