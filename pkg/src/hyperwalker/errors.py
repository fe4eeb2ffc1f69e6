"""Exception hierarchy shared by every hyperwalker module."""


class HyperWalkerError(Exception):
    """Base class for all library errors."""


class ContractViolation(HyperWalkerError, ValueError):
    """A precondition of an operation was not met by the caller."""


class DegenerateVectorError(HyperWalkerError, ValueError):
    """A vector had (near-)zero norm where a direction was required."""


class DuplicateInsertError(HyperWalkerError, KeyError):
    pass


class EmptyIndexError(HyperWalkerError):
    pass


class NotFoundError(HyperWalkerError, KeyError):
    pass


class NoKnowledgeBaseError(HyperWalkerError):
    """Raised when a disease edge is requested but no Knowledge node exists."""


class FormatError(HyperWalkerError):
    """Binary stream has the wrong magic bytes or an unsupported version."""


class CorruptionError(HyperWalkerError):
    """Binary stream is truncated or fails its checksum."""


class ValidationError(HyperWalkerError, ValueError):
    """Aggregated per-line validation failures from record ingestion.

    Attributes:
        problems: list of ``(line_number, message)`` pairs, 1-based lines.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.problems[:10])
        more = "" if len(self.problems) <= 10 else f" (+{len(self.problems) - 10} more)"
        super().__init__(f"{len(self.problems)} invalid record(s): {lines}{more}")
