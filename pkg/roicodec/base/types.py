from enum import Enum
from typing import TypedDict


class Variant(Enum):
    SSF = "ssf"
    IMPLICIT = "implicit"
    LATENT_SCALING = "latent_scaling"

    @property
    def uses_mask(self) -> bool:
        return self is not Variant.SSF

    @property
    def uses_gain(self) -> bool:
        return self is Variant.LATENT_SCALING


class FrameType(Enum):
    IFRAME = "I"
    PFRAME = "P"


class ChunkKind(Enum):
    GAIN_HYPER = 1
    GAIN_LATENT = 2
    IFRAME_HYPER = 3
    IFRAME_LATENT = 4
    FLOW_HYPER = 5
    FLOW_LATENT = 6
    RESIDUAL_HYPER = 7
    RESIDUAL_LATENT = 8


class FrameRateReport(TypedDict):
    frame: int
    frame_type: str
    bits_main: float
    bits_hyper: float
    bits_gain: float
    bits_total: float
    bytes_coded: int


class TrainingRecord(TypedDict):
    step: int
    loss: float
    bits_main: float
    bits_hyper: float
    bits_gain: float
    mse_roi: float
    mse_nonroi: float
