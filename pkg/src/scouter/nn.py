"""Parameter initializers and small composite layers built on the tensor core."""
from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, add, matmul, mul, relu, sigmoid, sub, tanh

Params = Dict[str, Tensor]

GRU_WEIGHTS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h")
GRU_BIASES = ("b_z", "b_r", "b_h")


def uniform_param(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    return uniform_param(rng, (fan_in, fan_out), bound), uniform_param(rng, (fan_out,), bound)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with weight stored as ``in x out``."""
    return add(matmul(x, weight), bias)


def init_mlp(rng: np.random.Generator, widths: List[int], prefix: str) -> Params:
    params = {}
    for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        w, b = init_linear(rng, fi, fo)
        params[f"{prefix}.{i}.weight"] = w
        params[f"{prefix}.{i}.bias"] = b
    return params


def mlp(x: Tensor, params: Params, prefix: str, depth: int) -> Tensor:
    # ReLU between layers, none after the last
    for i in range(depth):
        x = linear(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        if i < depth - 1:
            x = relu(x)
    return x


def init_gru(rng: np.random.Generator, dim: int, prefix: str = "gru") -> Params:
    bound = 1.0 / np.sqrt(dim)
    params = {f"{prefix}.{k}": uniform_param(rng, (dim, dim), bound) for k in GRU_WEIGHTS}
    params.update({f"{prefix}.{k}": uniform_param(rng, (dim,), bound) for k in GRU_BIASES})
    return params


def gru_cell(x: Tensor, h: Tensor, params: Params, prefix: str = "gru") -> Tensor:
    """One GRU update of hidden state ``h`` given input ``x`` (both ``n x dim``).

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    h_cand = tanh(x W_h + (r * h) U_h + b_h)
    h_new = (1 - z) * h + z * h_cand
    """
    if x.shape != h.shape:
        raise DimensionError(f"gru_cell: input {x.shape} and hidden {h.shape} differ")
    p = {k: params[f"{prefix}.{k}"] for k in GRU_WEIGHTS + GRU_BIASES}
    dim = x.shape[-1]
    for k in GRU_WEIGHTS:
        if p[k].shape != (dim, dim):
            raise DimensionError(f"gru_cell: {k} has shape {p[k].shape}, expected {(dim, dim)}")
    z = sigmoid(add(add(matmul(x, p["w_z"]), matmul(h, p["u_z"])), p["b_z"]))
    r = sigmoid(add(add(matmul(x, p["w_r"]), matmul(h, p["u_r"])), p["b_r"]))
    cand = tanh(add(add(matmul(x, p["w_h"]), matmul(mul(r, h), p["u_h"])), p["b_h"]))
    return add(mul(sub(1.0, z), h), mul(z, cand))
