"""Shared neural-network building blocks on top of the autodiff primitives.

Parameters live in a ParameterStore under hierarchical dotted names; forward
functions receive the per-step leaf-tensor dict and are pure.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


def init_linear(store: ParameterStore, rng: np.random.Generator, name: str,
                n_in: int, n_out: int, bias: bool = True) -> None:
    scale = 1.0 / np.sqrt(max(n_in, 1))
    store.add(f"{name}.w", rng.normal(scale=scale, size=(n_in, n_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(n_out))


def linear(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    out = x @ p[f"{name}.w"]
    if f"{name}.b" in p:
        out = out + p[f"{name}.b"]
    return out


def init_mlp(store: ParameterStore, rng: np.random.Generator, name: str, dims: list[int]) -> None:
    for i in range(len(dims) - 1):
        init_linear(store, rng, f"{name}.{i}", dims[i], dims[i + 1])


def mlp(p: dict[str, Tensor], name: str, x: Tensor, n_layers: int) -> Tensor:
    """n_layers linear maps with SiLU between them (none after the last)."""
    h = x
    for i in range(n_layers):
        h = linear(p, f"{name}.{i}", h)
        if i < n_layers - 1:
            h = ad.silu(h)
    return h


def init_layer_norm(store: ParameterStore, name: str, dim: int) -> None:
    store.add(f"{name}.g", np.ones(dim))
    store.add(f"{name}.b", np.zeros(dim))


def layer_norm(p: dict[str, Tensor], name: str, x: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / ad.sqrt(var + eps) * p[f"{name}.g"] + p[f"{name}.b"]


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = ad.exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    xs = x - shift
    return xs - ad.log(ad.exp(xs).sum(axis=axis, keepdims=True))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x * Tensor(mask)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))
