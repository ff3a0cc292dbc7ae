"""Exception hierarchy shared by the enhancement toolkit."""


class ToolkitError(Exception):
    """Base class for every error raised by the toolkit."""


class WavFormatError(ToolkitError):
    """Malformed or non-WAV audio file."""


class UnsupportedCodecError(WavFormatError):
    """WAV file with an encoding other than PCM16 or float32."""


class DegenerateSignalError(ToolkitError):
    """Signal is all-zero or otherwise unusable for the requested operation."""


class TooShortError(ToolkitError):
    """Signal or segment shorter than the operation requires."""


class SpectrogramError(ToolkitError):
    """Inconsistent spectrogram metadata."""


class DimensionMismatchError(ToolkitError):
    pass


class TemplateNotFoundError(ToolkitError):
    pass


class InsufficientDataError(ToolkitError):
    """Not enough training frames for the requested model size."""


class ModelFormatError(ToolkitError):
    """Model container with a bad magic, version or dimension."""


class AnnotationError(ToolkitError):
    """Segments overlap, leave gaps or fall outside the waveform."""


class AnnotationParseError(AnnotationError):
    """Unknown class/error token or unparseable row."""


class AlignmentError(ToolkitError):
    pass


class ConfigurationError(ToolkitError):
    """Bad configuration, missing model or missing template bank."""
