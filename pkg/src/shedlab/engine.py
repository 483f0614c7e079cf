"""A small dense NN core on numpy: layers, forward/backward and momentum SGD.

Tensors are plain ``numpy.ndarray`` objects. Images use NCHW layout, dense
weights are stored ``(out, in)`` and conv weights ``(out, in, kh, kw)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class StructuralError(ValueError):
    """Shape mismatch, stale cache or inconsistent layout."""


# --------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise StructuralError(f"dense({self.in_features},{self.out_features}) got input {shape}")
        return (self.out_features,)

    def forward(self, p, x, training):
        return x @ p["weight"].T + p["bias"], x

    def backward(self, p, x, dout):
        grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
        return dout @ p["weight"], grads


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0

    def param_shapes(self):
        return {
            "weight": (self.out_channels, self.in_channels, self.kh, self.kw),
            "bias": (self.out_channels,),
        }

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise StructuralError(f"conv2d expects ({self.in_channels}, H, W), got {shape}")
        _, h, w = shape
        ho = (h + 2 * self.padding - self.kh) // self.stride + 1
        wo = (w + 2 * self.padding - self.kw) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise StructuralError(f"conv2d kernel larger than padded input {shape}")
        return (self.out_channels, ho, wo)

    def _windows(self, x):
        pad = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (self.kh, self.kw), axis=(2, 3))
        s = self.stride
        return xp.shape, win[:, :, ::s, ::s]

    def forward(self, p, x, training):
        padded_shape, win = self._windows(x)
        # (N, C, Ho, Wo, kh, kw) x (O, C, kh, kw) -> (N, Ho, Wo, O)
        out = np.tensordot(win, p["weight"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + p["bias"][None, :, None, None]
        return np.ascontiguousarray(out), (x, padded_shape)

    def backward(self, p, cache, dout):
        x, padded_shape = cache
        _, win = self._windows(x)
        w = p["weight"]
        grads = {
            "weight": np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3])),
            "bias": dout.sum(axis=(0, 2, 3)),
        }
        dxp = np.zeros(padded_shape, dtype=dout.dtype)
        s = self.stride
        ho, wo = dout.shape[2], dout.shape[3]
        for i in range(self.kh):
            for j in range(self.kw):
                # (N, O, Ho, Wo) x (O, C) -> (N, Ho, Wo, C)
                contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += contrib.transpose(0, 3, 1, 2)
        pad = self.padding
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return np.ascontiguousarray(dxp), grads


@dataclass(frozen=True)
class ReLU:
    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        return shape

    def forward(self, p, x, training):
        return np.maximum(x, 0.0), x > 0

    def backward(self, p, positive, dout):
        return dout * positive, {}


@dataclass(frozen=True)
class Flatten:
    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, p, x, training):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, shape, dout):
        return dout.reshape(shape), {}


@dataclass(frozen=True)
class BatchNorm:
    """Per-channel batch normalization over axis 1 (dense or NCHW input).

    Training uses batch statistics and updates the running buffers stored in
    the ParamStore; evaluation uses the running buffers.
    """

    channels: int
    eps: float = 1e-5
    momentum: float = 0.1

    def param_shapes(self):
        return {"gamma": (self.channels,), "beta": (self.channels,)}

    def buffer_shapes(self):
        return {"running_mean": (self.channels,), "running_var": (self.channels,)}

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise StructuralError(f"batchnorm({self.channels}) got input {shape}")
        return shape

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bcast(v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, p, x, training, buffers=None):
        axes = self._axes(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if buffers is not None:
                m = self.momentum
                buffers["running_mean"] *= 1 - m
                buffers["running_mean"] += m * mean
                buffers["running_var"] *= 1 - m
                buffers["running_var"] += m * var
        else:
            mean, var = buffers["running_mean"], buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
        out = xhat * self._bcast(p["gamma"], x) + self._bcast(p["beta"], x)
        return out, (xhat, inv_std, training)

    def backward(self, p, cache, dout):
        xhat, inv_std, training = cache
        if not training:
            raise StructuralError("backward through batchnorm in evaluation mode")
        axes = self._axes(dout)
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        m = dout.size // self.channels
        dxhat = dout * self._bcast(p["gamma"], dout)
        dx = (
            self._bcast(inv_std / m, dout)
            * (
                m * dxhat
                - self._bcast(dxhat.sum(axis=axes), dout)
                - xhat * self._bcast((dxhat * xhat).sum(axis=axes), dout)
            )
        )
        return dx, grads


PRUNABLE_KINDS = (Dense, Conv2d)


# --------------------------------------------------------------------------
# parameters and network


@dataclass
class ParamStore:
    """Named parameter tensors in registration order.

    ``version`` is bumped by every in-place update so that a forward cache
    can tell whether it still describes the current parameters.
    """

    tensors: dict = field(default_factory=dict)
    prunable: tuple = ()
    buffers: dict = field(default_factory=dict)
    version: int = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.tensors.items()},
            self.prunable,
            {k: v.copy() for k, v in self.buffers.items()},
            self.version,
        )

    def prunable_count(self) -> int:
        return sum(self.tensors[n].size for n in self.prunable)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shape  # validates composition

    @property
    def output_shape(self):
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def param_shapes(self):
        """``{name: shape}`` in registration order."""
        return {
            f"{i}.{k}": shape
            for i, layer in enumerate(self.layers)
            for k, shape in layer.param_shapes().items()
        }

    def prunable_names(self):
        return tuple(
            f"{i}.weight" for i, layer in enumerate(self.layers) if isinstance(layer, PRUNABLE_KINDS)
        )

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> ParamStore:
        """He-normal weights, zero biases, unit batchnorm scale."""
        tensors, buffers = {}, {}
        for i, layer in enumerate(self.layers):
            for k, shape in layer.param_shapes().items():
                if k == "weight":
                    fan_in = int(np.prod(shape[1:]))
                    arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
                elif k == "gamma":
                    arr = np.ones(shape)
                else:
                    arr = np.zeros(shape)
                tensors[f"{i}.{k}"] = arr.astype(dtype)
            if isinstance(layer, BatchNorm):
                buffers[f"{i}.running_mean"] = np.zeros(layer.channels, dtype=dtype)
                buffers[f"{i}.running_var"] = np.ones(layer.channels, dtype=dtype)
        return ParamStore(tensors, self.prunable_names(), buffers)


def _layer_params(params, i, layer):
    return {k: params.tensors[f"{i}.{k}"] for k in layer.param_shapes()}


@dataclass
class ForwardCache:
    net: NetworkSpec
    params: ParamStore
    version: int
    entries: list


def forward(net: NetworkSpec, params: ParamStore, batch: np.ndarray, training: bool = True):
    """Return ``(logits, cache)``."""
    if batch.shape[1:] != net.input_shape:
        raise StructuralError(f"batch shape {batch.shape[1:]} != network input {net.input_shape}")
    x = batch
    entries = []
    for i, layer in enumerate(net.layers):
        p = _layer_params(params, i, layer)
        if isinstance(layer, BatchNorm):
            buffers = {k: params.buffers[f"{i}.{k}"] for k in layer.buffer_shapes()}
            x, c = layer.forward(p, x, training, buffers)
        else:
            x, c = layer.forward(p, x, training)
        entries.append(c)
    return x, ForwardCache(net, params, params.version, entries)


def backward(cache: ForwardCache, loss_grad: np.ndarray) -> dict:
    """Gradients for every parameter (masked ones included), keyed like the ParamStore."""
    if cache.params.version != cache.version:
        raise StructuralError("stale forward cache: parameters changed since forward")
    grads = {}
    dout = loss_grad
    for i in reversed(range(len(cache.net.layers))):
        layer = cache.net.layers[i]
        dout, g = layer.backward(_layer_params(cache.params, i, layer), cache.entries[i], dout)
        for k, v in g.items():
            grads[f"{i}.{k}"] = v
    return {name: grads[name] for name in cache.params.tensors}


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, reduction: str = "mean"):
    """Return ``(loss, dloss/dlogits)``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    rows = np.arange(n)
    losses = logsum - z[rows, labels]
    probs = np.exp(z - logsum[:, None])
    probs[rows, labels] -= 1.0
    if reduction == "mean":
        return float(losses.mean()), probs / n
    if reduction == "sum":
        return float(losses.sum()), probs
    raise ValueError(f"unknown reduction {reduction!r}")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @classmethod
    def for_params(cls, params: ParamStore, momentum=0.9, weight_decay=0.0):
        return cls(momentum, weight_decay, {k: np.zeros_like(v) for k, v in params.items()})


def sgd_step(params: ParamStore, grads: dict, opt: OptimizerState, mask=None, lr: float = 1e-2,
             decay: dict | None = None):
    """Heavy-ball SGD with weight decay folded into the gradient, in place.

    ``v <- mu*v + g + d*w ; w <- w - lr*v`` where ``d`` is ``decay[name]``
    (scalar or per-weight array) if given, else ``opt.weight_decay``.
    Weights and velocities that ``mask`` marks as pruned are set to zero.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
    mu = opt.momentum
    for name, w in params.items():
        v = opt.velocity.setdefault(name, np.zeros_like(w))
        if v.shape != w.shape:
            raise StructuralError(f"velocity shape {v.shape} != parameter shape {w.shape} for {name!r}")
        d = opt.weight_decay if decay is None or name not in decay else decay[name]
        v *= mu
        v += grads[name]
        v += d * w
        w -= lr * v
        if mask is not None and name in params.prunable:
            pruned = ~mask.mask_for(name)
            v[pruned] = 0.0
            w[pruned] = 0.0
    params.version += 1
