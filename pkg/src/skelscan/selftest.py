"""Quick oracle checks for each subsystem, run by ``skelscan selftest``.

Each suite compares an operation against an independent, deliberately naive
implementation and returns ``(passed, detail)``.
"""

from __future__ import annotations

import time
import warnings

import numpy as np

from . import kernels, tensor_io
from .cycle import CycleFcLayer, cycle_fc
from .heads import DkdLoss, cov_pool, dkd_loss, newton_schulz_sqrt
from .tensor import Tape, Tensor, precision


def naive_scan(u, delta, A, B, C, h0=None):
    """Unrolled recurrence with exact ZOH coefficients."""
    S, T, D = u.shape
    N = A.shape[1]
    h = np.zeros((S, D, N)) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.zeros((S, T, D))
    for s in range(S):
        for t in range(T):
            for d in range(D):
                for n in range(N):
                    z = delta[s, t, d] * A[d, n]
                    abar = np.exp(z)
                    bbar = (abar - 1.0) / A[d, n] * B[s, t, n] if abs(z) > 1e-4 else \
                        delta[s, t, d] * (1 + z / 2) * B[s, t, n]
                    h[s, d, n] = abar * h[s, d, n] + bbar * u[s, t, d]
                y[s, t, d] = sum(C[s, t, n] * h[s, d, n] for n in range(N))
    return y, h


def dense_cycle_fc(H, offsets, W, b, cyclic=True):
    """Cycle FC as one dense (C*T) x (C_out*T) block-sparse matrix product."""
    B_, C, T, N = H.shape
    Cout = W.shape[1]
    M = np.zeros((C * T, Cout * T))
    for c in range(C):
        for t in range(T):
            src = t + offsets[c]
            if cyclic:
                src %= T
            elif not 0 <= src < T:
                continue
            M[c * T + src, np.arange(Cout) * T + t] += W[c]
    flat = H.transpose(0, 3, 1, 2).reshape(B_, N, C * T)
    out = flat @ M
    return out.reshape(B_, N, Cout, T).transpose(0, 2, 3, 1) + b[None, :, None, None]


def random_spd(rng, C, cond):
    Q, _ = np.linalg.qr(rng.normal(size=(C, C)))
    ev = np.geomspace(1.0, cond, C) if C > 1 else np.ones(1)
    return (Q * ev) @ Q.T


def eig_sqrt(S):
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def suite_scan(n_cases=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        S, T, D, N = rng.integers(1, 4), rng.integers(1, 16), rng.integers(1, 5), rng.integers(1, 5)
        u = rng.normal(size=(S, T, D))
        delta = rng.uniform(1e-3, 0.5, (S, T, D))
        A = -rng.uniform(0.1, 4.0, (D, N))
        B, C = rng.normal(size=(S, T, N)), rng.normal(size=(S, T, N))
        ref, _ = naive_scan(u, delta, A, B, C)
        for name in kernels.available():
            y, _ = kernels.get(name).scan_forward(u, delta, A, B, C, None, 0)
            worst = max(worst, float(np.abs(y - ref).max()))
    return worst < 1e-10, f"max |diff| {worst:.2e}"


def suite_cycle_fc(n_cases=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision("float64"):
        for _ in range(n_cases):
            C, T, K = int(rng.integers(1, 7)), int(rng.integers(1, 9)), int(rng.choice([1, 3, 5]))
            layer = CycleFcLayer(C, int(rng.integers(1, 5)), K, rng, cyclic=bool(rng.integers(2)))
            H = rng.normal(size=(2, C, T, 3))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                got = cycle_fc(Tensor(H), layer).data
            ref = dense_cycle_fc(H, layer.offsets, layer.weight.data, layer.bias.data, layer.cyclic)
            worst = max(worst, float(np.abs(got - ref).max()))
    return worst < 1e-12, f"max |diff| {worst:.2e}"


def suite_newton_schulz(iterations=15, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision("float64"):
        for _ in range(10):
            S = random_spd(rng, 8, rng.uniform(1, 100))
            Y = newton_schulz_sqrt(Tensor(S[None]), iterations).data[0]
            R = eig_sqrt(S)
            worst = max(worst, float(np.linalg.norm(Y - R) / np.linalg.norm(R)))
    return worst < 1e-3, f"max relative error {worst:.2e} at K={iterations}"


def suite_cov_pool(seed=0):
    rng = np.random.default_rng(seed)
    O = rng.normal(size=(2, 4, 10))
    with precision("float64"):
        got = cov_pool(Tensor(O)).data
    Oc = O - O.mean(axis=2, keepdims=True)
    ref = Oc @ Oc.transpose(0, 2, 1) / O.shape[2]
    err = float(np.abs(got - ref).max())
    return err < 1e-12, f"max |diff| {err:.2e}"


def suite_dkd(seed=0):
    t, s = np.array([[2.0, 0.0, 0.0]]), np.array([[0.0, 2.0, 0.0]])

    def p(z):
        e = np.exp(z - z.max())
        return e / e.sum()

    pt, ps = p(t[0]), p(s[0])
    bt, bs = np.array([pt[0], 1 - pt[0]]), np.array([ps[0], 1 - ps[0]])
    mt, ms = pt[1:] / pt[1:].sum(), ps[1:] / ps[1:].sum()
    ref = np.sum(bs * np.log(bs / bt)) + 8 * np.sum(ms * np.log(ms / mt))
    with precision("float64"):
        got = dkd_loss(Tensor(s), t, [0], DkdLoss(temperature=1.0, tau_squared=False)).item()
    return abs(got - ref) < 1e-12, f"|diff| {abs(got - ref):.2e}"


def suite_gradients(seed=0):
    from .ssm import scan

    rng = np.random.default_rng(seed)
    with precision("float64"):
        arrs = [rng.normal(size=(2, 5, 3)), rng.uniform(0.01, 0.5, (2, 5, 3)), -rng.uniform(0.5, 2, (3, 4)),
                rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))]
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        w = rng.normal(size=(2, 5, 3))
        with Tape():
            (scan(*ts) * w).sum().backward()
        worst = 0.0
        eps = 1e-5
        for i, a in enumerate(arrs):
            fd = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                hi = [x.copy() for x in arrs]
                lo = [x.copy() for x in arrs]
                hi[i][idx] += eps
                lo[i][idx] -= eps
                fd[idx] = (np.sum(scan(*[Tensor(x) for x in hi]).data * w)
                           - np.sum(scan(*[Tensor(x) for x in lo]).data * w)) / (2 * eps)
            worst = max(worst, float(np.abs(ts[i].grad - fd).max() / max(np.abs(fd).max(), 1e-12)))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def suite_tensor_io(seed=0):
    rng = np.random.default_rng(seed)
    ok = True
    for dt in (np.float32, np.float64):
        a = rng.normal(size=(3, 0, 2) if dt is np.float32 else (2, 3, 4)).astype(dt)
        b = tensor_io.loads(tensor_io.dumps(a))
        ok &= b.dtype == a.dtype and b.shape == a.shape and np.array_equal(a, b)
    return bool(ok), "round-trip f32/f64"


def suite_resample(seed=0):
    from .data import resample_frames

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(100, 1, 2, 3))
    got = resample_frames(x, 64)
    pos = np.linspace(0, 99, 64)
    ref = np.stack([np.stack([np.interp(pos, np.arange(100), x[:, 0, j, k]) for k in range(3)], -1)
                    for j in range(2)], 1)[:, None]
    err = float(np.abs(got - ref).max())
    return err < 1e-12, f"max |diff| {err:.2e}"


SUITES = {
    "scan": suite_scan,
    "cycle_fc": suite_cycle_fc,
    "newton_schulz": suite_newton_schulz,
    "cov_pool": suite_cov_pool,
    "dkd_loss": suite_dkd,
    "gradients": suite_gradients,
    "tensor_io": suite_tensor_io,
    "resample": suite_resample,
}


def run_all(stream=print) -> bool:
    all_ok = True
    for name, fn in SUITES.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        stream(f"{'PASS' if ok else 'FAIL'} {name:<14} {detail} ({time.perf_counter() - t0:.2f}s)")
    return all_ok
