"""Error hierarchy shared by every operator. Each error knows the CLI exit code it maps to."""


class RoiCodecError(Exception):

    """Base class for all errors raised by roicodec."""

    exit_code = 2


class UsageError(RoiCodecError):

    """Bad command-line usage or an inconsistent flag set."""

    exit_code = 1


class ConfigError(RoiCodecError):

    """Unknown config key, malformed value or a variant/submodule mismatch."""

    exit_code = 1


class DimensionError(RoiCodecError):

    """Tensor shapes do not line up."""


class ParameterError(RoiCodecError):

    """A scalar argument is outside its valid range."""


class ContractError(RoiCodecError):

    """A pre- or post-condition of an operation was violated."""


class FormatError(RoiCodecError):

    """A file on disk does not follow its documented format."""


class BitstreamError(FormatError):

    """Truncated, tampered or mismatched bitstream."""


class RangeCoderError(RoiCodecError):

    """Symbol outside its CDF support or a corrupt coder state."""


class OverlapError(RoiCodecError):

    """Two R-D curves share no quality interval."""


class UndefinedRegionError(RoiCodecError):

    """A PSNR region is empty in every frame."""


class NumericError(RoiCodecError):

    """NaN/Inf values, division by zero or zero probabilities."""

    exit_code = 3


class TrainingDivergedError(NumericError):

    """Loss stayed far above its initial value for too long."""
