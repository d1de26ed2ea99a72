"""Exception types shared across the package."""


class MetricGPError(Exception):
    """Base class for all package errors."""


class ConfigError(MetricGPError):
    """A configuration value violates its documented constraints."""


class ParseError(MetricGPError):
    """Expression text could not be parsed.

    Attributes:
        offset: 0-based byte offset into the UTF-8 input where parsing stopped.
        expected: tuple of token descriptions that would have been accepted.
    """

    def __init__(self, message, offset, expected=()):
        super().__init__(f"{message} at byte {offset}" + (f" (expected {', '.join(expected)})" if expected else ""))
        self.offset = offset
        self.expected = tuple(expected)


class ValidationError(MetricGPError):
    """A metric graph violates a structural invariant.

    Carries the `Violation` report produced by `graph.validate`.
    """

    def __init__(self, violation):
        super().__init__(str(violation))
        self.violation = violation


class DimensionMismatchError(MetricGPError):
    """Embedding inputs do not share one dimension."""


class NonFiniteError(MetricGPError):
    """A forward or backward intermediate became NaN or infinite.

    Signals a degenerate candidate metric; callers map it to worst fitness.
    """

    def __init__(self, message, node_index=None):
        super().__init__(message)
        self.node_index = node_index


class FormatError(MetricGPError):
    """An interaction file contains a malformed line."""

    def __init__(self, message, line_number):
        super().__init__(f"{message} (line {line_number})")
        self.line_number = line_number


class EmptyDatasetError(MetricGPError):
    """A loaded dataset contains no interactions."""


class SamplerStallError(MetricGPError):
    """Negative sampling failed repeatedly; the user row is near-complete."""


class DegenerateCandidateError(MetricGPError):
    """Training produced non-finite batches too often to continue."""


class EmptyRelevantError(MetricGPError):
    """Ranking metrics were requested against an empty relevant set."""


class UnknownTokenError(MetricGPError):
    """A sequence token is not part of the surrogate vocabulary."""
