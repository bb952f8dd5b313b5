"""Exception hierarchy shared by every runtime module.

Each error type carries a stable machine-readable ``category`` string.  The
CLI prints the category as the first token of its one-line error output, so
the strings here are part of the external interface and must not change
casually.
"""

from __future__ import annotations


class SemaqError(Exception):
    """Base class for all runtime errors."""

    category = "internal-error"


class ValidationError(SemaqError):
    """A value violates a structural rule (bad field value, empty text, ...)."""

    category = "validation-error"


class ConfigurationError(SemaqError):
    """Bad or missing configuration: unknown model, duplicate tool name, ..."""

    category = "config-error"


class DataAccessError(SemaqError):
    """A dataset or record source could not be read."""

    category = "data-error"


class CapabilityError(SemaqError):
    """The context lacks a capability the operation needs (e.g. no index)."""

    category = "capability-error"


class BackendError(SemaqError):
    """Terminal model-provider failure."""

    category = "backend-error"


class RetryableBackendError(BackendError):
    """Transient transport failure; raised once the retry budget is spent."""


class MockMissError(BackendError):
    """No mock rule matched a prompt.

    The scripted backend never guesses: an unmatched prompt means the test
    script is wrong, so this is a hard error rather than a default reply.
    """

    category = "mock-miss"


class PipelineSyntaxError(SemaqError):
    """Pipeline text failed to lex or parse."""

    category = "parse-error"

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class OperatorError(SemaqError):
    """A semantic operator failed on a record (unparseable response, ...)."""

    category = "operator-error"

    def __init__(self, message: str, *, raw_response: str | None = None,
                 input_tokens: int = 0, output_tokens: int = 0, calls: int = 0):
        self.raw_response = raw_response
        self.input_tokens = input_tokens
        self.output_tokens = output_tokens
        self.calls = calls
        super().__init__(message)


class RunAbortedError(SemaqError):
    """A pipeline run exceeded its failure budget."""

    category = "operator-error"


class AgentError(SemaqError):
    """An agent run ended without a usable result."""

    category = "agent-error"

    def __init__(self, message: str, *, trace=None, reason: str = ""):
        self.trace = trace
        self.reason = reason
        if reason == "budget":
            # budget aborts surface as their own CLI exit category
            self.category = "budget-exceeded"
        super().__init__(message)


class ComputeError(AgentError):
    category = "compute-error"


class SearchError(AgentError):
    category = "search-error"


class StatsError(SemaqError):
    """Statistics collection failed (empty context, no sample)."""

    category = "stats-error"


class EstimationError(SemaqError):
    """A plan cost estimate needed a statistic that was never collected."""

    category = "estimation-error"


class PolicyInfeasibleError(SemaqError):
    """No candidate plan satisfies the optimization policy's constraint."""

    category = "policy-infeasible"


class StoreError(SemaqError):
    """Context store corruption or I/O failure."""

    category = "store-error"


class StoreConflictError(StoreError):
    """Attempt to register a context id that exists with different content."""

    category = "store-conflict"
