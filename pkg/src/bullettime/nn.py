"""Layers used by the feature extractors and view-interpolation MLPs.

Parameters live in a flat name->Tensor mapping (see optim.ParamStore); the
functions here are pure given that mapping. The "conv block" used throughout
is convolution -> ReLU -> instance normalization.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, bilinear_upsample, conv2d

INSTANCE_NORM_EPS = 1e-5


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(np.float32)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y[n,j] = sum_i x[n,i] w[i,j] + b[j]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"dense shape mismatch: x {x.data.shape} vs W {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(
            f"dense bias shape {b.data.shape} does not match W {w.data.shape}"
        )
    return x @ w + b


def instance_norm(x: Tensor, gain: Tensor, shift: Tensor,
                  eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Normalize each channel of a (C,H,W) or (N,C,H,W) map to zero mean and
    unit variance over its spatial extent, then apply the affine."""
    if eps <= 0:
        raise ValueError("instance_norm eps must be positive")
    axes = (1, 2) if x.data.ndim == 3 else (2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    xhat = centered / (var + eps).sqrt()
    c = x.data.shape[0 if x.data.ndim == 3 else 1]
    shape = (c, 1, 1) if x.data.ndim == 3 else (1, c, 1, 1)
    return xhat * gain.reshape(*shape) + shift.reshape(*shape)


def conv_block(x: Tensor, params: dict, name: str, stride: int = 1) -> Tensor:
    """conv2d -> ReLU -> instance norm, 3x3 kernel, padding 1."""
    y = conv2d(x, params[f"{name}.w"], stride=stride, pad=1)
    y = y.relu()
    return instance_norm(y, params[f"{name}.gain"], params[f"{name}.shift"])


def residual_block(x: Tensor, params: dict, name: str) -> Tensor:
    """y = relu(x + Conv(Conv(x))) with identity skip; shape preserving."""
    h = conv_block(x, params, f"{name}.conv1", stride=1)
    h = conv_block(h, params, f"{name}.conv2", stride=1)
    if h.data.shape != x.data.shape:
        raise ValueError(
            f"residual block changed shape {x.data.shape} -> {h.data.shape}"
        )
    return (x + h).relu()


def init_conv_block(rng, params: dict, name: str, cin: int, cout: int,
                    k: int = 3) -> None:
    fan_in = cin * k * k
    fan_out = cout * k * k
    params[f"{name}.w"] = Tensor(
        glorot_uniform(rng, (cout, cin, k, k), fan_in, fan_out), requires_grad=True
    )
    params[f"{name}.gain"] = Tensor(np.ones(cout, np.float32), requires_grad=True)
    params[f"{name}.shift"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)


def init_residual_block(rng, params: dict, name: str, c: int) -> None:
    init_conv_block(rng, params, f"{name}.conv1", c, c)
    init_conv_block(rng, params, f"{name}.conv2", c, c)


def init_dense(rng, params: dict, name: str, cin: int, cout: int) -> None:
    params[f"{name}.w"] = Tensor(
        glorot_uniform(rng, (cin, cout), cin, cout), requires_grad=True
    )
    params[f"{name}.b"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)


def mlp(x: Tensor, params: dict, name: str, n_layers: int,
        final_activation=None) -> Tensor:
    """Dense stack `name.0 .. name.{n-1}`, ReLU between layers."""
    h = x
    for i in range(n_layers):
        h = dense(h, params[f"{name}.{i}.w"], params[f"{name}.{i}.b"])
        if i < n_layers - 1:
            h = h.relu()
    if final_activation is not None:
        h = final_activation(h)
    return h


def init_mlp(rng, params: dict, name: str, dims: list) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_dense(rng, params, f"{name}.{i}", a, b)


def upconv(x: Tensor, params: dict, name: str, factor: int = 2) -> Tensor:
    """Bilinear upsampling by `factor` followed by a stride-1 conv block."""
    return conv_block(bilinear_upsample(x, factor), params, name, stride=1)
