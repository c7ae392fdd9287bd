"""Selective state-space primitives.

The continuous system ``h' = A h + B x, y = C h`` with diagonal negative ``A``
is discretised by zero-order hold with an input-dependent step ``delta``:

    A_bar = exp(delta * A)
    B_bar = (delta * A)^-1 (exp(delta * A) - 1) * delta * B

and scanned along time, ``h_t = A_bar_t h_{t-1} + B_bar_t x_t``,
``y_t = C_t . h_t``.  ``B_t``, ``C_t`` and ``delta_t`` are projections of
``x_t``, which is what makes the scan selective.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from ._scan_ref import SERIES_THRESHOLD, SIMPLE, ZOH, zoh_coefficients  # noqa: F401
from .errors import ConfigError, ContractError, ShapeError
from .nn import Linear, Module, Parameter
from .tensor import Tensor, concat, custom_op, pad_time_left

__all__ = [
    "SsmParams",
    "discretize",
    "selective_scan",
    "selective_scan_chunked",
    "scan",
    "causal_conv1d",
    "selection",
]

_MODES = {"zoh": ZOH, "simple": SIMPLE}


def discretize(A, B_t, delta_t, mode: str = "zoh"):
    """Zero-order-hold discretisation of a diagonal system.

    Returns ``(A_bar, B_bar)`` as float64 arrays broadcast over the inputs.
    Below ``|delta * A| < 1e-4`` the exact formula is replaced by its series
    ``delta * B * (1 + delta * A / 2)``.
    """
    delta_t = np.asarray(getattr(delta_t, "data", delta_t), dtype=np.float64)
    if np.any(delta_t <= 0):
        raise ContractError("discretize: step size delta must be strictly positive")
    A = np.asarray(getattr(A, "data", A), dtype=np.float64)
    B_t = np.asarray(getattr(B_t, "data", B_t), dtype=np.float64)
    abar, bscale = zoh_coefficients(delta_t, A, _MODES[mode])
    return abar, bscale * B_t


class SsmParams(Module):
    """Per-channel selective-SSM parameters for one scan direction.

    ``A = -exp(A_log)`` keeps the diagonal strictly negative.  The step size is
    ``softplus(dt_proj(x_proj(x)[:dt_rank]))`` (low-rank, bias in ``dt_proj``);
    ``B_t`` and ``C_t`` are the remaining ``2 * n_state`` columns of ``x_proj``.
    """

    def __init__(self, d_inner: int, n_state: int, rng: np.random.Generator, dt_rank: int | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, mode: str = "zoh"):
        super().__init__()
        if d_inner <= 0 or n_state <= 0:
            raise ConfigError(f"d_inner and n_state must be positive, got {d_inner}, {n_state}")
        if mode not in _MODES:
            raise ConfigError(f"unknown discretisation mode {mode!r}")
        self.d_inner, self.n_state = d_inner, n_state
        self.dt_rank = dt_rank or math.ceil(d_inner / 16)
        self.mode = mode
        self.x_proj = Linear(d_inner, self.dt_rank + 2 * n_state, rng, bias=False)
        self.dt_proj = Linear(self.dt_rank, d_inner, rng, bias=True)
        bound = self.dt_rank ** -0.5
        self.dt_proj.weight.data[...] = rng.uniform(-bound, bound, self.dt_proj.weight.shape)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_inner))
        # inverse softplus so that softplus(bias) == dt
        self.dt_proj.bias.data[...] = dt + np.log(-np.expm1(-dt))
        self.A_log = Parameter(np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1))),
                               decay=False)

    @property
    def A(self) -> Tensor:
        return -self.A_log.exp()


def selection(x: Tensor, params: SsmParams):
    """Input-dependent (delta, B, C) for x of shape (S, T, D)."""
    R, N = params.dt_rank, params.n_state
    proj = params.x_proj(x)
    dt_low = proj[..., :R]
    Bm = proj[..., R:R + N]
    Cm = proj[..., R + N:]
    delta = params.dt_proj(dt_low).softplus()
    return delta, Bm, Cm


def _f64(t: Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.data, dtype=np.float64)


def scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, h0: Tensor | None = None,
         mode: str = "zoh", return_state: bool = False, backend: str | None = None):
    """Differentiable linear recurrence over axis 1 (see module docstring).

    Shapes: u, delta (S, T, D); A (D, N); B, C (S, T, N); h0 (S, D, N).
    Returns y (S, T, D), plus the final state when ``return_state``.
    """
    S, T, D = u.shape
    N = A.shape[1]
    if delta.shape != u.shape or A.shape[0] != D or B.shape != (S, T, N) or C.shape != (S, T, N):
        raise ShapeError(f"scan: inconsistent shapes u{u.shape} delta{delta.shape} A{A.shape} "
                         f"B{B.shape} C{C.shape}")
    m = _MODES[mode]
    k = kernels.get(backend)
    dtype = u.dtype
    args = [_f64(u), _f64(delta), _f64(A), _f64(B), _f64(C)]
    h0_arr = None if h0 is None else _f64(h0)
    if T == 0:
        y = np.zeros((S, 0, D))
        hT = np.zeros((S, D, N)) if h0_arr is None else h0_arr
    else:
        y, hT = k.scan_forward(*args, h0_arr, m)
    ny = y.size
    merged = np.concatenate([y.ravel(), hT.ravel()]).astype(dtype) if return_state else y.astype(dtype)
    parents = (u, delta, A, B, C) + ((h0,) if h0 is not None else ())

    def back(g):
        g = np.asarray(g, dtype=np.float64)
        if return_state:
            gy = np.ascontiguousarray(g[:ny].reshape(S, T, D))
            ghT = np.ascontiguousarray(g[ny:].reshape(S, D, N))
        else:
            gy, ghT = np.ascontiguousarray(g), None
        if T == 0:
            zero = [np.zeros_like(a) for a in args]
            grads = zero + [np.zeros((S, D, N)) if ghT is None else ghT]
        else:
            grads = list(k.scan_backward(*args, h0_arr, gy, ghT, m))
        return tuple(grads[:5]) + ((grads[5],) if h0 is not None else ())

    out = custom_op(merged, parents, back, "selective_scan")
    if not return_state:
        return out
    y_t = out[:ny].reshape(S, T, D)
    h_t = out[ny:].reshape(S, D, N)
    return y_t, h_t


def selective_scan(x: Tensor, params: SsmParams, backend: str | None = None) -> Tensor:
    """Selective scan of x (S, T, D_inner) with h_0 = 0; causal in time."""
    if x.ndim != 3 or x.shape[2] != params.d_inner:
        raise ShapeError(f"selective_scan expects (S, T, {params.d_inner}), got {x.shape}")
    delta, Bm, Cm = selection(x, params)
    return scan(x, delta, params.A, Bm, Cm, mode=params.mode, backend=backend)


def selective_scan_chunked(x: Tensor, params: SsmParams, chunk: int, backend: str | None = None) -> Tensor:
    """Same result as :func:`selective_scan`, processing time in blocks of
    ``chunk`` steps with the hidden state carried across block boundaries."""
    if not isinstance(chunk, (int, np.integer)) or chunk <= 0:
        raise ConfigError(f"chunk must be a positive int, got {chunk!r}")
    delta, Bm, Cm = selection(x, params)
    A = params.A
    T = x.shape[1]
    if T <= chunk:
        return scan(x, delta, A, Bm, Cm, mode=params.mode, backend=backend)
    h = None
    pieces = []
    for start in range(0, T, chunk):
        sl = (slice(None), slice(start, min(start + chunk, T)))
        y, h = scan(x[sl], delta[sl], A, Bm[sl], Cm[sl], h0=h, mode=params.mode,
                    return_state=True, backend=backend)
        pieces.append(y)
    return concat(pieces, axis=1)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution of x (S, T, D) with kernel (D, k_w).

    ``out[t] = sum_j kernel[:, j] * x[t - j]`` with zeros before t = 0.
    """
    D, kw = kernel.shape
    if x.shape[-1] != D:
        raise ShapeError(f"causal_conv1d: kernel has {D} channels, input {x.shape}")
    T = x.shape[1]
    xp = pad_time_left(x, 1, kw - 1)
    out = None
    for j in range(kw):
        start = kw - 1 - j
        term = xp[:, start:start + T, :] * kernel[:, j]
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias
    return out

