"""Finite-difference oracle shared by the gradient suites."""

import numpy as np

from roicodec.operators.tensor_core.api import Tape, Tensor, backward


def analytic_grads(fn, tensors):
    """Gradients of the scalar `fn()` w.r.t. each tensor, computed through the tape."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = fn()
    backward(loss)
    return [t.grad.copy() for t in tensors]


def numeric_grad(fn, tensor, eps=1e-3):
    """Central finite differences of the scalar `fn()` w.r.t. every element of `tensor`."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn().item()
        flat[i] = orig - eps
        minus = fn().item()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-6)
    return np.abs(analytic - numeric).max() / scale


def away_from_zero(x, margin=0.05):
    return np.where(x >= 0, x + margin, x - margin)


def random_tensor(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape))


def randomize_zero_layers(module, rng, scale=0.1):
    """Give zero-initialised decoder layers random weights so outputs depend on every input."""
    for name, tensor in module.named_parameters():
        if name.endswith("weight") and not tensor.data.any():
            tensor.data = rng.normal(scale=scale, size=tensor.shape).astype(tensor.data.dtype)
    return module


def tiny_config(**overrides):
    from roicodec.operators.networks.config import ModelConfig

    values = dict(channels=8, latent_channels=6, hyper_channels=4, gain_latent_channels=3, f_latent=4, hyper_downsampling=2)
    values.update(overrides)
    return ModelConfig(**values)
