from roicodec.base.config import Config
from roicodec.base.exceptions import ConfigError
from roicodec.base.types import Variant


class ModelConfig(Config):
    variant: str = "ssf"
    # desk-scale widths
    channels: int = 64
    latent_channels: int = 48
    hyper_channels: int = 32
    gain_latent_channels: int = 16
    f_latent: int = 16
    # two extra stride-2 stages between latent and hyper-latent
    hyper_downsampling: int = 4
    sigma_min: float = 0.01
    scale_levels: int = 4
    sigma_base: float = 1.5
    # added to the raw scale channel before the sigmoid; a zero flow then warps from level ~0
    flow_scale_offset: float = -6.0
    gop_size: int = 12
    beta: float = 1e-3
    gamma: float = 30.0

    @property
    def model_variant(self) -> Variant:
        try:
            return Variant(self.variant)
        except ValueError as e:
            raise ConfigError(f"Unknown variant '{self.variant}', expected one of {[v.value for v in Variant]}") from e

    def validate(self) -> "ModelConfig":
        self.model_variant
        for name in ("f_latent", "hyper_downsampling"):
            value = getattr(self, name)
            if value < 2 or value & (value - 1):
                raise ConfigError(f"{name} must be a power of two >= 2, got {value}")
        if self.scale_levels < 2:
            raise ConfigError(f"scale_levels must be >= 2, got {self.scale_levels}")
        if self.gop_size < 1:
            raise ConfigError(f"gop_size must be >= 1, got {self.gop_size}")
        return self
