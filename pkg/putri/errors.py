# Copyright 2024 Tarkan Al-Kazily


class PutriError(Exception):
    """Base Putri Exception class"""


class ConfigError(PutriError):
    """Invalid model, prune or training configuration."""


class ShapeError(PutriError):
    """Matrix operands with incompatible shapes."""


class NonFiniteError(PutriError):
    """A matrix holds NaN or Inf entries where finite values are required."""


class SingularSystemError(PutriError):
    """
    The normal equations could not be factorized even after ridge escalation.

    Attributes:
        ridge: Final ridge value that was attempted.
    """

    def __init__(self, message: str, ridge: float):
        super().__init__(message)
        self.ridge = ridge


class TokenError(PutriError):
    """Token id outside of the vocabulary, or an empty token sequence."""


class CorpusError(PutriError):
    """Calibration corpus could not be read or windowed."""


class ModelFormatError(PutriError):
    """Base error for malformed model files."""


class BadMagicError(ModelFormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(ModelFormatError):
    """File format version is not supported."""


class TruncatedPayloadError(ModelFormatError):
    """File ends before all tensors in the header index were read."""


class ShapeHeaderError(ModelFormatError):
    """Header tensor shapes are inconsistent with the config or byte lengths."""


class ChecksumError(ModelFormatError):
    """Tensor payload does not match its recorded CRC-32."""


class HeadMaskError(PutriError):
    """Head mask is inconsistent with the model it is applied to."""


class SurgeryError(PutriError):
    """Invalid structural removal request (head already removed, bad node index)."""


class InfeasibleTargetError(PutriError):
    """
    Target sparsity cannot be reached.

    Attributes:
        max_sparsity: Largest sparsity reachable with the configured p_min.
    """

    def __init__(self, message: str, max_sparsity: float):
        super().__init__(message)
        self.max_sparsity = max_sparsity


class PerplexityError(PutriError):
    """Perplexity cannot be computed for the given sequences."""
