"""Exception types shared across the toolkit."""


class LeakqError(Exception):
    """Base class for all toolkit errors."""


class ShapeTooSmall(LeakqError):
    """Fold shape capacity is smaller than the trace length."""


class InsufficientData(LeakqError):
    """A secret does not have the required number of runs."""


class KeyLengthMismatch(LeakqError):
    """Secret bit length does not match what the workload requires."""


class NoAnalyticTruth(LeakqError):
    """No closed-form ground truth exists for this workload configuration."""


class EmptyDataset(LeakqError):
    """Dataset lacks the positive/negative pairs needed for the operation."""


class NonFiniteLoss(LeakqError):
    """Training loss became NaN or infinite."""


class ShapeMismatch(LeakqError):
    """Input shapes do not match the model."""


class MissingHoldout(LeakqError):
    """De-biasing was requested without held-out pairs."""


class SpaceTooLarge(LeakqError):
    """Secret/observation space exceeds the exact-enumeration limit."""


class TraceTooLong(LeakqError):
    """Trace exceeds the exact Shapley enumeration limit."""


class MissingArtifacts(LeakqError):
    """A report was requested from a directory lacking the needed artifacts."""


class ConfigError(LeakqError):
    """Run configuration is malformed or inconsistent."""
