"""Fully connected networks stored as flat, named parameter dictionaries.

A parameter set is a plain ``dict[str, torch.Tensor]``; network ``foo``
with L layers owns ``foo.0.weight``, ``foo.0.bias`` ... ``foo.{L-1}.bias``.
Weights are (fan_in, fan_out) and layers compute ``x @ W + b``.
"""
from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigurationError

Params = dict


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp(rng: np.random.Generator, prefix: str, sizes, zero_head: bool = False) -> Params:
    params = {}
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_head and i == n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            w = xavier_uniform(rng, fan_in, fan_out)
        params[f"{prefix}.{i}.weight"] = torch.tensor(w, dtype=torch.float64)
        params[f"{prefix}.{i}.bias"] = torch.zeros(fan_out, dtype=torch.float64)
    return params


def layer_sizes(params: Params, prefix: str) -> list[int]:
    sizes = []
    i = 0
    while f"{prefix}.{i}.weight" in params:
        w = params[f"{prefix}.{i}.weight"]
        if sizes and sizes[-1] != w.shape[0]:
            raise ConfigurationError(f"{prefix}: layer {i} expects {w.shape[0]} inputs, previous layer gives {sizes[-1]}")
        if not sizes:
            sizes.append(w.shape[0])
        b = params[f"{prefix}.{i}.bias"]
        if b.shape != (w.shape[1],):
            raise ConfigurationError(f"{prefix}: layer {i} bias has shape {tuple(b.shape)}")
        sizes.append(w.shape[1])
        i += 1
    if not sizes:
        raise ConfigurationError(f"no parameters found for network {prefix!r}")
    return sizes


def mlp_forward(params: Params, prefix: str, x: torch.Tensor, residual: bool = False) -> torch.Tensor:
    """ReLU hidden layers, linear output.

    With ``residual`` the output of the second hidden layer gets the first
    hidden layer added back before the head.
    """
    w0 = params[f"{prefix}.0.weight"]
    if x.shape[-1] != w0.shape[0]:
        raise ConfigurationError(f"{prefix} expects input size {w0.shape[0]}, got {x.shape[-1]}")
    i, h, first = 0, x, None
    while f"{prefix}.{i}.weight" in params:
        h = h @ params[f"{prefix}.{i}.weight"] + params[f"{prefix}.{i}.bias"]
        if f"{prefix}.{i + 1}.weight" in params:
            h = torch.relu(h)
            if i == 0:
                first = h
            elif i == 1 and residual:
                h = h + first
        i += 1
    return h
