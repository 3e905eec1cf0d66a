"""Exception hierarchy shared across the package."""


class AdvTransferError(Exception):
    """Base class for all package errors."""


class ParseError(AdvTransferError):
    """Malformed dataset file. Carries the line number or byte offset."""

    def __init__(self, message, *, line=None, offset=None):
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (offset {offset})"
        super().__init__(message + where)
        self.line = line
        self.offset = offset


class DimensionError(AdvTransferError, ValueError):
    pass


class StratificationError(AdvTransferError):
    pass


class InvalidArguments(AdvTransferError, ValueError):
    pass


class DivergenceError(AdvTransferError):
    """Training produced a non-finite loss; lower the learning rate."""


class UnsupportedOperation(AdvTransferError):
    pass


class FormatError(AdvTransferError):
    pass


class AttackError(AdvTransferError):
    """Base class for per-attack failures the harness records and skips."""


class NoInitialAdversarial(AttackError):
    pass


class DegenerateEstimate(AttackError):
    all_adversarial = None


class DegenerateGradient(AttackError):
    pass


class StepFailure(AttackError):
    pass


class InvalidSource(AttackError):
    pass


class ZeroVarianceError(AdvTransferError, ValueError):
    pass


class ConfigError(AdvTransferError, ValueError):
    pass


class InsufficientSources(AdvTransferError):
    pass


class AttackQualityError(AdvTransferError):
    pass
