"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, no_grad, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max |n| (absolute error when the numeric gradient is all zero)."""
    scale = float(np.abs(numeric).max(initial=0.0))
    err = float(np.abs(np.asarray(analytic) - numeric).max(initial=0.0))
    return err / scale if scale > 0 else err


def _scalar(fn, arrays, weights):
    with no_grad():
        out = fn(*[Tensor(a) for a in arrays])
    return float(np.sum(out.data * weights)) if weights is not None else float(out.data.sum())


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-4,
                    wrt: Sequence[int] | None = None, seed: int = 0) -> float:
    """Worst relative error between tape and finite-difference gradients of
    ``sum(fn(*inputs) * w)`` for a fixed random weighting ``w``, in float64."""
    with precision("float64"):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        wrt = range(len(arrays)) if wrt is None else wrt
        tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
        with Tape() as tape:
            out = fn(*tensors)
            weights = np.random.default_rng(seed).uniform(0.5, 1.5, out.shape)
            (out * weights).sum().backward()
        tape.clear()
        worst = 0.0
        for i in wrt:
            numeric = np.zeros_like(arrays[i])
            for idx in np.ndindex(arrays[i].shape):
                orig = arrays[i][idx]
                arrays[i][idx] = orig + eps
                hi = _scalar(fn, arrays, weights)
                arrays[i][idx] = orig - eps
                lo = _scalar(fn, arrays, weights)
                arrays[i][idx] = orig
                numeric[idx] = (hi - lo) / (2 * eps)
            analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(numeric)
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_module_gradients(loss_fn: Callable[[], Tensor], params, eps: float = 1e-4, seed: int = 0,
                           floor: float = 1e-6) -> dict:
    """Directional check per parameter tensor: tape ``<grad, v>`` against
    ``(L(p + eps v) - L(p - eps v)) / 2 eps`` for one random unit direction ``v``.

    ``params`` maps names to Parameters; returns ``{name: relative error}``.
    Directional derivatives smaller than ``floor`` are compared absolutely
    (a parameter the loss is invariant to has a pure-noise FD estimate).
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss_fn().backward()
    tape.clear()
    out = {}
    for name, p in params.items():
        v = rng.normal(size=p.shape)
        v /= np.linalg.norm(v) or 1.0
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        analytic = float(np.sum(g * v))
        base = p.data.copy()
        with no_grad():
            p.data = base + eps * v
            hi = float(loss_fn().data)
            p.data = base - eps * v
            lo = float(loss_fn().data)
        p.data = base
        numeric = (hi - lo) / (2 * eps)
        out[name] = abs(analytic - numeric) / max(abs(numeric), floor)
    return out
