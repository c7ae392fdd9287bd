"""Parameter containers and the small set of layers the network is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, elementwise, get_dtype, layer_norm
from .errors import ShapeError


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``decay`` marks whether weight decay applies (False for biases and norms).
    """

    def __init__(self, data, decay: bool = True):
        super().__init__(np.array(data, dtype=get_dtype()), requires_grad=True)
        self.decay = decay


class Module:
    """Attribute-registered tree of parameters, buffers and sub-modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        for m_prefix, m in self._walk():
            for bname in m._buffers:
                key = m_prefix + bname
                if key in state:
                    object.__setattr__(m, bname, np.array(state[key], copy=True))

    def _walk(self, prefix: str = ""):
        yield prefix, self
        for name, m in self._modules.items():
            yield from m._walk(prefix + name + ".")


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map over the last axis: ``x @ W + b`` with W of shape (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(uniform_init(rng, (n_in, n_out), n_in))
        self.bias = Parameter(uniform_init(rng, (n_out,), n_in), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects last extent {self.n_in}, got shape {x.shape}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(n), decay=False)
        self.beta = Parameter(np.zeros(n), decay=False)

    def forward(self, x: Tensor, axis: int = -1) -> Tensor:
        return layer_norm(x, axis, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    """Batch normalisation over every axis except the last (channel-last input).

    Training mode normalises with batch statistics and updates the running
    estimates with ``momentum``; eval mode uses the running estimates.
    """

    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.n, self.momentum, self.eps = n, momentum, eps
        self.gamma = Parameter(np.ones(n), decay=False)
        self.beta = Parameter(np.zeros(n), decay=False)
        self.register_buffer("running_mean", np.zeros(n))
        self.register_buffer("running_var", np.ones(n))

    def forward(self, x: Tensor) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if self.training:
            mu = x.mean(axis=axes, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=axes, keepdims=True)
            count = x.size // self.n
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            unbiased = var.data.reshape(-1) * (count / max(count - 1, 1))
            self.running_var = (1 - m) * self.running_var + m * unbiased
            xhat = xc * elementwise("reciprocal", (var + self.eps).sqrt())
        else:
            scale = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
            xhat = (x - self.running_mean.astype(x.dtype)) * scale
        return xhat * self.gamma + self.beta


class CausalConv1d(Module):
    """Depthwise causal convolution along time for (S, T, D) input.

    ``kernel[d, j]`` weights the input ``j`` steps in the past, so a kernel
    of ``[0, 1]`` is a one-step delay.
    """

    def __init__(self, channels: int, width: int, rng: np.random.Generator):
        super().__init__()
        if width < 1:
            raise ValueError("kernel width must be >= 1")
        self.width = width
        self.kernel = Parameter(uniform_init(rng, (channels, width), width))
        self.bias = Parameter(uniform_init(rng, (channels,), width), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        from .ssm import causal_conv1d

        return causal_conv1d(x, self.kernel, self.bias)

