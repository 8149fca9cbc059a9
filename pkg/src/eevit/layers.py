"""Parameter containers and the neural layers shared by backbone and heads."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class EmptyAxisError(ValueError):
    """A normalization or pooling axis has no elements."""


class Parameter(Tensor):
    """A named, trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.trainable = True


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draw truncated at two standard deviations."""
    return np.clip(rng.standard_normal(shape) * std, -2.0 * std, 2.0 * std)


class Module:
    """Minimal parameter registry with named traversal and state dicts."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, "Module"] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.asarray(value, dtype=np.float64)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)
        return arr

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            full = f"{prefix}{name}"
            p.name = full
            yield full, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield f"{prefix}{name}", b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix=f"{prefix}{cname}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            p.data = state[name].astype(np.float64).copy()
            p.grad = None
        for name, b in self.named_buffers():
            if name not in state:
                raise KeyError(f"missing buffer {name!r}")
            b[...] = state[name]

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """Affine map on the last axis; doubles as a pointwise (1x1) convolution."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.weight)
        if self.bias is not None:
            out = ag.add(out, self.bias)
        return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    if x.shape[-1] == 0:
        raise EmptyAxisError("layer_norm over an empty axis")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * ag.power(var + eps, -0.5)
    return normed * gain + bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-12, identity: bool = False):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps
        self.identity = identity

    def __call__(self, x: Tensor) -> Tensor:
        if self.identity:
            return x
        return layer_norm(x, self.gain, self.bias, self.eps)


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-8,
) -> Tensor:
    """Channel-last batch normalization with running statistics.

    In training mode the batch statistics are used (over every axis but
    the last) and the running estimates are updated in place.  In eval
    mode, and for single-sample training batches, the running estimates
    are used unchanged.
    """
    if x.size == 0:
        raise EmptyAxisError("batch_norm on an empty tensor")
    axes = tuple(range(x.ndim - 1))
    use_batch_stats = training and x.shape[0] > 1
    if use_batch_stats:
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(-1)
        normed = centered * ag.power(var + eps, -0.5)
    else:
        scale = 1.0 / np.sqrt(running_var + eps)
        normed = (x - running_mean) * scale
    return normed * gain + bias


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-8, momentum: float = 0.1, identity: bool = False):
        super().__init__()
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.eps = eps
        self.momentum = momentum
        self.identity = identity

    def __call__(self, x: Tensor) -> Tensor:
        if self.identity:
            return x
        return batch_norm(
            x,
            self.gain,
            self.bias,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
        )


class DepthwiseConv2d(Module):
    """Per-channel k x k convolution on [B, H, W, C] grids."""

    def __init__(
        self,
        channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = True,
    ):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(trunc_normal(rng, (kernel, kernel, channels)))
        self.bias = Parameter(np.zeros(channels)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.depthwise_conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = ag.add(out, self.bias)
        return out


def avg_pool_global(x: Tensor, axis: int = 1) -> Tensor:
    """Mean over one axis (the token axis by default)."""
    if x.shape[axis] == 0:
        raise EmptyAxisError("global average pool over an empty axis")
    return x.mean(axis=axis)


def tokens_to_grid(x: Tensor) -> Tensor:
    """[B, N, D] -> [B, sqrt(N), sqrt(N), D]; the token count must be square."""
    b, n, d = x.shape
    side = int(round(n**0.5))
    if side * side != n:
        raise ValueError(f"token count {n} does not form a square grid")
    return x.reshape((b, side, side, d))


def grid_to_tokens(x: Tensor) -> Tensor:
    b, h, w, d = x.shape
    return x.reshape((b, h * w, d))
