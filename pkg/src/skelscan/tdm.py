"""Temporal dynamics block: a bidirectional selective scan over joint trajectories.

Data flow for H of shape (B, C, T, N):

1. layer norm over C, 1x1 projection to C/2, batch norm, ReLU
2. multi-scale Cycle FC interaction (residual)
3. reorder into token sequences (one per joint for the default temporal layout)
4. a forward branch on the sequences and a backward branch on their time
   reversal, each ``out(SSM(SiLU(conv(W_x M))) * SiLU(W_z M))``
5. flip the backward output back, concatenate to C channels, layer norm
6. temporal average pooling with the block stride
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cycle import MtiModule
from .errors import ConfigError, ContractError, ShapeError
from .nn import BatchNorm, CausalConv1d, LayerNorm, Linear, Module
from .ssm import SsmParams, selective_scan
from .tensor import Tensor, concat, custom_op


SCAN_STRATEGIES = ("T", "TS", "ST", "S")


@dataclass(frozen=True)
class ScanLayout:
    """How a (B, C, T, N) map is flattened into (streams, length, C) token sequences.

    ``T``: one length-T sequence per (batch, joint).  ``TS``: per batch, joint 1
    over all frames, then joint 2, ...  ``ST``: per batch, all joints of frame
    1, then frame 2, ...  ``S``: one length-N sequence per (batch, frame).
    """

    strategy: str = "T"

    def __post_init__(self):
        if self.strategy not in SCAN_STRATEGIES:
            raise ConfigError(f"unknown scan strategy {self.strategy!r}; expected one of {SCAN_STRATEGIES}")

    def dims(self, B: int, T: int, N: int) -> tuple[int, int]:
        return {"T": (B * N, T), "TS": (B, N * T), "ST": (B, T * N), "S": (B * T, N)}[self.strategy]

    def to_sequence(self, x: Tensor) -> Tensor:
        B, C, T, N = x.shape
        streams, length = self.dims(B, T, N)
        if self.strategy in ("T", "TS"):
            y = x.permute(0, 3, 2, 1)  # B, N, T, C
        else:
            y = x.permute(0, 2, 3, 1)  # B, T, N, C
        return y.reshape(streams, length, C)

    def from_sequence(self, seq: Tensor, B: int, T: int, N: int) -> Tensor:
        C = seq.shape[-1]
        if self.strategy in ("T", "TS"):
            return seq.reshape(B, N, T, C).permute(0, 3, 2, 1)
        return seq.reshape(B, T, N, C).permute(0, 3, 1, 2)


def temporal_pool(x: Tensor, stride: int, kind: str = "avg") -> Tensor:
    """Pool (B, C, T, N) along T with kernel = stride; output length ceil(T / stride)."""
    if stride == 1:
        return x
    if stride != 2:
        raise ConfigError(f"temporal pooling stride must be 1 or 2, got {stride}")
    B, C, T, N = x.shape
    if T < 2:
        raise ContractError("temporal pooling with stride 2 needs at least 2 frames")
    even = T - T % 2
    head = x[:, :, :even] if even != T else x
    if kind == "avg":
        pooled = head.reshape(B, C, even // 2, 2, N).mean(axis=3)
    elif kind == "max":
        pooled = _pair_max(head.reshape(B, C, even // 2, 2, N))
    else:
        raise ConfigError(f"unknown pooling kind {kind!r}")
    if even != T:
        pooled = concat([pooled, x[:, :, even:]], axis=2)
    return pooled


def _pair_max(x: Tensor) -> Tensor:
    xd = x.data
    pick = xd[:, :, :, 1] > xd[:, :, :, 0]
    out = np.where(pick, xd[:, :, :, 1], xd[:, :, :, 0])

    def back(g):
        gx = np.zeros_like(xd)
        gx[:, :, :, 1] = g * pick
        gx[:, :, :, 0] = g * ~pick
        return (gx,)

    return custom_op(out, (x,), back, "max_pool")


class ScanBranch(Module):
    """One scan direction: gated, convolved selective scan on (S, L, C/2) tokens."""

    def __init__(self, width: int, d_inner: int, n_state: int, conv_width: int, rng: np.random.Generator,
                 dt_rank: int | None = None, discretization: str = "zoh"):
        super().__init__()
        self.in_x = Linear(width, d_inner, rng, bias=False)
        self.in_z = Linear(width, d_inner, rng, bias=False)
        self.conv = CausalConv1d(d_inner, conv_width, rng)
        self.ssm = SsmParams(d_inner, n_state, rng, dt_rank=dt_rank, mode=discretization)
        self.out = Linear(d_inner, width, rng, bias=False)

    def forward(self, M: Tensor) -> Tensor:
        u = self.conv(self.in_x(M)).silu()
        y = selective_scan(u, self.ssm)
        return self.out(y * self.in_z(M).silu())


class TdmBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator, stride: int = 1, mti_scales=(1, 3, 5),
                 expand: float = 1.0, n_state: int = 16, conv_width: int = 4,
                 scan: str | ScanLayout = "T", pool: str = "avg", offset_rule: str = "literal",
                 cyclic: bool = True, bn_momentum: float = 0.1, dt_rank: int | None = None,
                 discretization: str = "zoh"):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"TDM channel width must be even, got {channels}")
        if stride not in (1, 2):
            raise ConfigError(f"TDM stride must be 1 or 2, got {stride}")
        half = channels // 2
        d_inner = int(round(expand * half))
        if d_inner <= 0:
            raise ConfigError(f"expand={expand} gives a non-positive inner width")
        self.channels, self.half, self.d_inner = channels, half, d_inner
        self.stride, self.pool = stride, pool
        self.layout = scan if isinstance(scan, ScanLayout) else ScanLayout(scan)
        self.norm_in = LayerNorm(channels)
        self.proj = Linear(channels, half, rng)
        self.bn = BatchNorm(half, momentum=bn_momentum)
        self.mti = MtiModule(half, rng, scales=mti_scales, offset_rule=offset_rule, cyclic=cyclic)
        self.fwd = ScanBranch(half, d_inner, n_state, conv_width, rng, dt_rank, discretization)
        self.bwd = ScanBranch(half, d_inner, n_state, conv_width, rng, dt_rank, discretization)
        self.norm_out = LayerNorm(channels)

    def forward(self, H: Tensor) -> Tensor:
        return tdm_forward(H, self)

    def tie_branches(self) -> None:
        """Copy forward-branch parameters into the backward branch."""
        src = dict(self.fwd.named_parameters())
        for name, p in self.bwd.named_parameters():
            p.data = src[name].data.copy()


def channel_project(H: Tensor, block: TdmBlock) -> Tensor:
    """(B, C, T, N) -> (B, C/2, T, N): layer norm over C, 1x1 projection, batch norm, ReLU."""
    if H.ndim != 4:
        raise ShapeError(f"expected (B, C, T, N), got {H.shape}")
    if H.shape[1] % 2:
        raise ConfigError(f"channel projection needs even C, got {H.shape[1]}")
    if H.shape[1] != block.channels:
        raise ShapeError(f"block expects C={block.channels}, got {H.shape[1]}")
    x = block.norm_in(H.permute(0, 2, 3, 1))
    x = block.bn(block.proj(x)).relu()
    return x.permute(0, 3, 1, 2)


def make_scan_sequence(omega: Tensor, layout: ScanLayout) -> Tensor:
    return layout.to_sequence(omega)


def bidirectional_scan(omega: Tensor, block: TdmBlock):
    """Forward and (re-flipped) backward branch outputs, each (streams, L, C/2)."""
    M_plus = block.layout.to_sequence(omega)
    M_minus = M_plus.flip(1)
    y_plus = block.fwd(M_plus)
    y_minus = block.bwd(M_minus).flip(1)
    return y_plus, y_minus


def tdm_forward(H: Tensor, block: TdmBlock, fuse_norm: bool = True) -> Tensor:
    B, C, T, N = H.shape
    if block.stride == 2 and T < 2:
        raise ContractError("stride-2 TDM block needs at least 2 frames")
    omega = block.mti(channel_project(H, block))
    y_plus, y_minus = bidirectional_scan(omega, block)
    fused = concat([y_plus, y_minus], axis=-1)
    if fuse_norm:
        fused = block.norm_out(fused)
    out = block.layout.from_sequence(fused, B, T, N)
    return temporal_pool(out, block.stride, block.pool)


def tdm_param_count(channels: int, mti_scales=(1, 3, 5), expand: float = 1.0, n_state: int = 16,
                    conv_width: int = 4, dt_rank: int | None = None) -> int:
    """Closed-form parameter count of one TDM block.

    With h = C/2, d = inner width, R = dt rank, n = state size, k = conv width:

        2C                      input layer norm
        C*h + h                 1x1 channel projection
        2h                      batch norm affine
        |S_K| * (h*h + h)       Cycle FC layers
        2 * [2*h*d              W_x, W_z
             + d*k + d          depthwise causal conv
             + d*(R + 2n)       selection projection (delta, B, C)
             + R*d + d          step-size projection
             + d*n              A
             + d*h]             output projection
        2C                      fusion layer norm
    """
    h = channels // 2
    d = int(round(expand * h))
    R = dt_rank or math.ceil(d / 16)
    n, k = n_state, conv_width
    branch = 2 * h * d + d * k + d + d * (R + 2 * n) + R * d + d + d * n + d * h
    return 2 * channels + channels * h + h + 2 * h + len(tuple(mti_scales)) * (h * h + h) + 2 * branch + 2 * channels
