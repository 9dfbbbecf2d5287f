"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError is a usage
problem (exit 1), everything else derived from SpecEnhanceError is a
data problem (exit 2); unexpected exceptions are internal (exit 3).
"""


class SpecEnhanceError(Exception):
    """Base class for all package errors."""


class ConfigError(SpecEnhanceError):
    """Bad key/value in a config file or invalid CLI parameter combination."""


# audio_io
class MalformedWav(SpecEnhanceError):
    """File is not a structurally valid RIFF/WAVE container."""


class UnsupportedFormat(SpecEnhanceError):
    """WAV is valid but not PCM16 mono."""


class IoFailure(SpecEnhanceError):
    """Filesystem read/write failed."""


class EmptyClip(SpecEnhanceError):
    """Clip too short to be split into the requested number of parts."""


class EncoderFailure(SpecEnhanceError):
    """External encoder subprocess exited nonzero; message carries its output."""


class PairLengthMismatch(SpecEnhanceError):
    """Degraded/reference clips differ in length after delay trimming."""


class ManifestError(SpecEnhanceError):
    """Dataset manifest file is malformed."""


# stft
class ClipTooShort(SpecEnhanceError):
    """Clip shorter than one analysis frame."""


class ShapeMismatch(SpecEnhanceError):
    """Tensor shape inconsistent with the configuration or peer tensor."""


# model
class ShapeTooSmall(SpecEnhanceError):
    """Spatial extent smaller than the convolution kernel."""


class CacheMismatch(SpecEnhanceError):
    """Backward called with a cache from a different forward pass."""


class BadMagic(SpecEnhanceError):
    """Checkpoint file does not start with the expected magic bytes."""


class VersionUnsupported(SpecEnhanceError):
    """Checkpoint version newer than this code understands."""


class ChecksumMismatch(SpecEnhanceError):
    """Checkpoint CRC32 trailer does not match (truncation or corruption)."""


# losses
class ConstantTarget(SpecEnhanceError):
    """Pixel loss denominator vanished: reference tensor is constant."""


class TooSmall(SpecEnhanceError):
    """Tensor smaller than the SSIM window."""


# train
class EmptyTrainSet(SpecEnhanceError):
    """Manifest contains no training entries."""


# quantize
class NonFiniteInput(SpecEnhanceError):
    """Tensor to quantize contains NaN or infinity."""


# metrics
class LengthMismatch(SpecEnhanceError):
    """Metric arguments have different sample counts."""


class SilentReference(SpecEnhanceError):
    """Reference signal is all zeros; SNR undefined."""


class TooShort(SpecEnhanceError):
    """Signal too short for the metric's analysis window."""
