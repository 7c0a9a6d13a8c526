"""Exception hierarchy shared by the pipeline.

ValidationError and its subclasses map to CLI exit code 1; genuine I/O
failures are raised as OSError (exit code 2).
"""


class PipelineError(Exception):
    pass


class ValidationError(PipelineError):
    """Bad input data, configuration, or usage."""


class ShapeError(ValidationError):
    """Tensor or layer shape mismatch."""


class ConfigError(ValidationError):
    """Invalid configuration value."""


class LabelError(ValidationError):
    """Severity score or class index out of range."""


class ManifestError(ValidationError):
    """Malformed dataset manifest."""


class VolumeFormatError(ValidationError):
    """Malformed volume file or slice stack."""


class SamplerError(ValidationError):
    """Batch sampler cannot satisfy its contract."""


class CheckpointError(ValidationError):
    """Checkpoint file rejected (version, digest, or truncation)."""
