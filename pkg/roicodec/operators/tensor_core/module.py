"""Parameter containers shared by the networks and the learned entropy models."""

import logging
from typing import Iterator

import numpy as np

from roicodec.base.exceptions import FormatError
from roicodec.operators.tensor_core.api import Tensor, get_dtype

logger = logging.getLogger(__name__)


class Module:
    """Owns named parameters and child modules; names are dotted paths used by the weight files."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def param(self, name: str, value: np.ndarray) -> Tensor:
        tensor = Tensor(np.asarray(value, dtype=get_dtype()).copy(), requires_grad=True)
        self._params[name] = tensor
        object.__setattr__(self, name, tensor)
        return tensor

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise FormatError(f"Weights do not match the model: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, tensor in own.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise FormatError(f"Parameter '{name}' has shape {value.shape}, model expects {tensor.shape}")
            tensor.data = value.astype(tensor.data.dtype).copy()
        logger.debug(f"Loaded {len(own)} parameters into {type(self).__name__}")

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())
