"""Exception hierarchy. CLI exit codes: validation 2, numeric failure 3, file I/O 4."""


class SliceflowError(Exception):
    """Base class for all library errors."""


class ValidationError(SliceflowError):
    """Invalid configuration or parameters, detected before any compute."""


class NumericError(SliceflowError):
    """Numeric failure during computation (divergence, stall, degeneracy)."""


class DomainError(NumericError):
    """Input outside the mathematical domain of an operation."""


class IntegrationDivergedError(NumericError):
    """Non-finite state encountered during ODE integration."""

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(message or f"non-finite state after integration step {step_index}")


class EssStalledError(NumericError):
    """Bracket shrinking exceeded the safeguard without an acceptance."""

    def __init__(self, bracket_width, log_gap, step_index=None):
        self.bracket_width = bracket_width
        self.log_gap = log_gap
        self.step_index = step_index
        where = "" if step_index is None else f" at chain step {step_index}"
        super().__init__(
            f"slice sampler stalled{where}: bracket width {bracket_width:.3e}, "
            f"log-potential gap {log_gap:.3e} (target may be near manifold-constrained)"
        )


class TrainingDivergedError(NumericError):
    """Non-finite loss during training; carries the loss trace so far."""

    def __init__(self, iteration, trace):
        self.iteration = iteration
        self.trace = trace
        super().__init__(f"training loss became non-finite at iteration {iteration}")


class BaselineDivergedError(NumericError):
    """Non-finite finite-difference gradient in the ascent baseline."""


class DegenerateWeightsError(NumericError):
    """All raw importance weights are -inf; reweighting is undefined."""


class EmptyPosteriorError(NumericError):
    """Every grid cell has -inf log density; the posterior has no mass on the grid."""


class FieldFileError(SliceflowError):
    """Problem reading or writing a velocity-field file."""


class MalformedHeaderError(FieldFileError):
    """Bad magic bytes, unsupported version, or inconsistent header fields."""


class DimensionMismatchError(FieldFileError):
    """Header dimensions and layer sizes do not describe a valid field."""


class TruncatedPayloadError(FieldFileError):
    """Payload shorter than the parameter count declared in the header."""


class ChecksumMismatchError(FieldFileError):
    """Stored payload checksum does not match the recomputed one."""
