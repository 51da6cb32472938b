"""Exception types shared across the pipeline.

Every error carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for data problems, 4 for training
divergence, 1 for anything else.
"""


class RfauthError(Exception):
    exit_code = 1


class ConfigError(RfauthError):
    """Bad or inconsistent run configuration."""

    exit_code = 2


class DataError(RfauthError):
    """Corrupt, malformed, or mutually inconsistent data."""

    exit_code = 3


class MalformedFile(DataError):
    """IQ file unreadable or its byte length is not a whole number of samples."""


class NonFiniteSample(DataError):
    """NaN or Inf encountered in a capture or a simulated transmission."""


class RecordingTooShort(DataError):
    """Recording shorter than the requested slice length."""


class LabelMismatch(DataError):
    """Device label universes disagree, or a set mixes devices where one is required."""


class ShapeError(DataError):
    """Array shape incompatible with the model or operation."""


class LengthMismatch(DataError):
    """Paired sequences have different lengths."""


class EmptyDeviceRow(DataError):
    """A device contributed no slices to an evaluation."""


class ZeroBaseline(DataError):
    """Improvement multiplier undefined for a zero baseline percentage."""


class HypothesisMismatch(DataError):
    """Raw and translated probability sets cover different device hypotheses."""


class SameDevice(DataError):
    """Adversarial evaluation requires two distinct devices."""


class Divergence(RfauthError):
    """Training loss became non-finite."""

    exit_code = 4
