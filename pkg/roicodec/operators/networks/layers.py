import math

import numpy as np

from roicodec.operators.tensor_core.api import Tensor, conv2d, relu, upsample_conv2d
from roicodec.operators.tensor_core.module import Module


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1, zero: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2
        if zero:
            weight = np.zeros((c_out, c_in, kernel, kernel))
        else:
            weight = rng.normal(scale=math.sqrt(2.0 / (c_in * kernel * kernel)), size=(c_out, c_in, kernel, kernel))
        self.param("weight", weight)
        self.param("bias", np.zeros((1, c_out, 1, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class UpConv2d(Conv2d):
    """Nearest-neighbour upsampling followed by a stride-1 convolution."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, factor: int = 2, kernel: int = 3, zero: bool = False):
        super().__init__(c_in, c_out, rng, kernel=kernel, stride=1, zero=zero)
        self.factor = factor

    def __call__(self, x: Tensor) -> Tensor:
        return upsample_conv2d(x, self.weight, self.bias, self.factor)


class Stack(Module):
    """Layers applied in order with relu between them (not after the last)."""

    def __init__(self, layers: list[Module]):
        super().__init__()
        self.depth = len(layers)
        for i, layer in enumerate(layers):
            setattr(self, f"conv{i}", layer)

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.depth):
            x = getattr(self, f"conv{i}")(x)
            if i < self.depth - 1:
                x = relu(x)
        return x


def downsampling_stack(c_in: int, width: int, c_out: int, stages: int, rng: np.random.Generator) -> Stack:
    widths = [c_in] + [width] * (stages - 1) + [c_out]
    return Stack([Conv2d(widths[i], widths[i + 1], rng, stride=2) for i in range(stages)])


def upsampling_stack(c_in: int, width: int, c_out: int, stages: int, rng: np.random.Generator) -> Stack:
    widths = [c_in] + [width] * (stages - 1) + [c_out]
    return Stack(
        [UpConv2d(widths[i], widths[i + 1], rng, zero=(i == stages - 1)) for i in range(stages)]
    )


def same_resolution_stack(c_in: int, width: int, c_out: int, depth: int, rng: np.random.Generator) -> Stack:
    widths = [c_in] + [width] * (depth - 1) + [c_out]
    return Stack([Conv2d(widths[i], widths[i + 1], rng, zero=(i == depth - 1)) for i in range(depth)])
