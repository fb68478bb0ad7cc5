from roicodec.base.config import Config


class CodecConfig(Config):
    gop_size: int = 12
    # gain amplifier, latent_scaling only
    ga: float = 1.0
    pad_mode: str = "reflect"
