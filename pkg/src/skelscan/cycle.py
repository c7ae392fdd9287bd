"""Cycle fully-connected layers and the multi-scale temporal interaction module.

A Cycle FC layer reads input channel ``c`` from frame ``t + offset(c)`` and
then applies an ordinary linear map over channels, so neighbouring frames are
mixed across channels at no parameter cost.  With the default rule
``offset(c) = (c mod K) - 1`` a kernel of 3 cycles the offsets -1, 0, 1.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Module, ModuleList, Parameter, uniform_init
from .tensor import Tensor, shift_groups

OFFSET_RULES = ("literal", "centered")


def channel_offsets(n_channels: int, kernel_size: int, rule: str = "literal") -> np.ndarray:
    if kernel_size <= 0:
        raise ConfigError(f"Cycle FC kernel size must be positive, got {kernel_size}")
    c = np.arange(n_channels)
    if rule == "literal":
        return c % kernel_size - 1
    if rule == "centered":
        return c % kernel_size - kernel_size // 2
    raise ConfigError(f"unknown offset rule {rule!r}; expected one of {OFFSET_RULES}")


class CycleFcLayer(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator,
                 offset_rule: str = "literal", cyclic: bool = True):
        super().__init__()
        self.c_in, self.c_out, self.kernel_size = c_in, c_out, kernel_size
        self.cyclic = cyclic
        self.offsets = channel_offsets(c_in, kernel_size, offset_rule)
        self.weight = Parameter(uniform_init(rng, (c_in, c_out), c_in))
        self.bias = Parameter(uniform_init(rng, (c_out,), c_in), decay=False)

    def forward(self, H: Tensor) -> Tensor:
        return cycle_fc(H, self)


def cycle_fc(H: Tensor, layer: CycleFcLayer) -> Tensor:
    """``out[:, :, t, n] = sum_c H[:, c, t + offset(c), n] W[c, :] + b`` for H (B, C, T, N).

    Time indices wrap modulo T (or read zeros when the layer is non-cyclic).
    """
    if H.ndim != 4 or H.shape[1] != layer.c_in:
        raise ShapeError(f"cycle_fc expects (B, {layer.c_in}, T, N), got {H.shape}")
    T = H.shape[2]
    if T < 1:
        raise ShapeError("cycle_fc needs at least one frame")
    if layer.kernel_size > T:
        warnings.warn(f"Cycle FC kernel {layer.kernel_size} exceeds sequence length {T}; offsets wrap",
                      stacklevel=2)
    shifted = shift_groups(H, axis=2, channel_axis=1, offsets=layer.offsets, cyclic=layer.cyclic)
    x = shifted.permute(0, 2, 3, 1)
    out = x @ layer.weight + layer.bias
    return out.permute(0, 3, 1, 2)


class MtiModule(Module):
    """Residual sum of Cycle FC layers at several kernel sizes (default 1, 3, 5)."""

    def __init__(self, channels: int, rng: np.random.Generator, scales=(1, 3, 5),
                 offset_rule: str = "literal", cyclic: bool = True, c_out: int | None = None):
        super().__init__()
        c_out = channels if c_out is None else c_out
        if c_out != channels:
            raise ConfigError(f"MTI residual needs C_out == C_in, got {c_out} != {channels}")
        self.scales = tuple(scales)
        self.layers = ModuleList(
            CycleFcLayer(channels, c_out, k, rng, offset_rule=offset_rule, cyclic=cyclic) for k in self.scales
        )

    def forward(self, H: Tensor) -> Tensor:
        return mti_forward(H, self)


def mti_forward(H: Tensor, module: MtiModule) -> Tensor:
    for layer in module.layers:
        if layer.c_out != layer.c_in:
            raise ConfigError(f"scale K={layer.kernel_size}: C_out {layer.c_out} != C_in {layer.c_in}")
    out = H
    for layer in module.layers:
        out = out + cycle_fc(H, layer)
    return out
