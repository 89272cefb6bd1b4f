"""Exception hierarchy.

``InputError`` subclasses indicate a problem with user-supplied data or
configuration (CLI exit code 1); everything else under ``MergeFrontError``
is an internal failure (CLI exit code 2).
"""


class MergeFrontError(Exception):
    """Base class for all library errors."""


class InputError(MergeFrontError):
    """Bad input data, configuration, or arguments."""


# --- container / tensor store ---

class FormatError(InputError):
    """Malformed container header or metadata."""


class CorruptPayload(InputError):
    """Tensor payload does not match its declared layout."""


class PatternError(InputError):
    """Layer-name pattern matched nothing or left tensors unclassifiable."""


class IndexGapError(InputError):
    """Captured layer ids are not contiguous starting at 0."""


# --- shared numeric-input validation ---

class ShapeError(InputError):
    """Tensor shapes disagree across models."""


class ArityError(InputError):
    """Wrong number of models, weights, or data points."""


class DomainError(InputError):
    """A numeric argument is outside its valid domain."""


class ConfigError(InputError):
    """Invalid or inconsistent configuration."""


class DegenerateError(InputError):
    """Parameters collapse the operation to a degenerate case."""


class ConstraintError(InputError):
    """Weight constraints (simplex / bounds) violated."""


# --- partitioning ---

class InfeasibleError(InputError):
    """Requested more blocks than layers."""


class BudgetError(InputError):
    """Exhaustive search space exceeds the allowed budget."""


# --- objectives / evaluation ---

class DegenerateSpecError(InputError):
    """Expert and base scores coincide on a benchmark."""


class MissingScoreError(InputError):
    """Evaluator output lacks a required benchmark score."""


class InvalidScoreError(InputError):
    """Evaluator produced a non-finite score."""


class EvaluationError(MergeFrontError):
    """External evaluator failed; carries its diagnostics."""

    def __init__(self, message, stdout="", stderr=""):
        super().__init__(message)
        self.stdout = stdout
        self.stderr = stderr


# --- surrogate / acquisition ---

class DimensionError(InputError):
    """Dimension exceeds what the sampler or acquisition supports."""


class ReferencePointError(InputError):
    """Reference point is not strictly dominated by the front."""


class NumericalError(MergeFrontError):
    """Linear-algebra failure that jitter could not repair."""


# --- driver ---

class ResumeError(InputError):
    """State file does not match the configuration being resumed."""


class EmptyFrontError(InputError):
    """Selection requested from an empty Pareto front."""
