"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class AuditKGError(Exception):
    """Base class for all package errors."""


# knowledge graph
class SchemaViolation(AuditKGError):
    pass


class KindMismatch(AuditKGError):
    pass


class NotFound(AuditKGError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class UnsupportedVersion(AuditKGError):
    pass


class ParseError(AuditKGError, ValueError):
    """Malformed input document.

    ``offset`` is a byte offset for JSON documents, ``line`` a 1-based line
    number for line-oriented formats; either may be ``None``.
    """

    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None):
        super().__init__(message)
        self.offset = offset
        self.line = line


# corpus
class EmptyProject(AuditKGError):
    pass


# llm gateway
class UnboundPlaceholder(AuditKGError):
    def __init__(self, name: str):
        super().__init__(f"unbound placeholder: {name}")
        self.name = name


class BudgetExhausted(AuditKGError):
    pass


class MalformedOutput(AuditKGError):
    pass


class ProviderError(AuditKGError):
    pass


# builder
class ClassificationEmpty(AuditKGError):
    pass


class DanglingMergeTarget(AuditKGError):
    pass


class LinkOutOfScope(AuditKGError):
    pass


# specification / harness / fuzzing
class ValidationFailed(AuditKGError):
    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = list(violations or [])


class StructuralCheckFailed(AuditKGError):
    def __init__(self, message: str, problems: list[str] | None = None):
        super().__init__(message)
        self.problems = list(problems or [])


class Blocked(AuditKGError):
    def __init__(self, attempts: int, diagnostics: str = ""):
        super().__init__(f"harness blocked after {attempts} failed compile attempts")
        self.attempts = attempts
        self.diagnostics = diagnostics


class ToolchainCrash(AuditKGError):
    pass


class RunFailed(AuditKGError):
    pass


class AttributionMismatch(AuditKGError):
    pass
