from roicodec.base.config import Config
from roicodec.base.exceptions import ConfigError


class TrainConfig(Config):
    variant: str = "implicit"
    beta: float = 1e-3
    gamma: float = 30.0
    # weight the distortion by the ROI mask; with variant=ssf this is the ROI-aware-loss baseline
    roi_loss: bool = True
    steps: int = 2000
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 4
    frames_per_example: int = 3
    crop_height: int = 64
    crop_width: int = 96
    # "shapes" or "perlin" masks for the synthetic data, ignored for frame directories
    mask_source: str = "shapes"
    prefetch: int = 2
    # data loader worker threads
    threads: int = 1
    log_every: int = 50
    checkpoint_every: int = 500
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def validate(self) -> "TrainConfig":
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.frames_per_example < 1:
            raise ConfigError(f"frames_per_example must be >= 1, got {self.frames_per_example}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError(f"Need steps >= 0 and batch >= 1, got {self.steps} and {self.batch}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.mask_source not in ("shapes", "perlin"):
            raise ConfigError(f"mask_source must be 'shapes' or 'perlin', got '{self.mask_source}'")
        return self
