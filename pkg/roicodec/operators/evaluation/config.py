from roicodec.base.config import Config
from roicodec.base.exceptions import ConfigError

QUALITY_FIELDS = ("roi_psnr", "nonroi_psnr")


class EvalConfig(Config):
    # gain amplifier values swept for latent_scaling checkpoints; other variants only use 1
    ga_values: tuple = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
    # 0 uses the GoP size each model was trained with
    gop_size: int = 0
    psnr_cap: float = 99.0
    # concurrent (checkpoint, ga) evaluations
    threads: int = 1
    plots: bool = True

    def validate(self) -> "EvalConfig":
        if not self.ga_values or min(self.ga_values) < 0:
            raise ConfigError(f"ga_values must be a non-empty list of values >= 0, got {self.ga_values}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.gop_size < 0:
            raise ConfigError(f"gop_size must be >= 0, got {self.gop_size}")
        return self
