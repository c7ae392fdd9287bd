"""Pure-NumPy selective-scan kernels (fallback when the extension is absent).

Both kernels work in float64 and vectorise over (streams, channels, state);
only the time loop runs in Python.

Shapes: u, delta (S, T, D); A (D, N); B, C (S, T, N); h0 (S, D, N).
``mode`` 0 is exact zero-order hold (series branch when |delta*A| < 1e-4),
mode 1 the simplified B_bar = delta * B.
"""

from __future__ import annotations

import numpy as np

SERIES_THRESHOLD = 1e-4
ZOH, SIMPLE = 0, 1


def _psi(z):
    # (z e^z - expm1(z)) / z^2, with a Taylor branch near 0
    small = np.abs(z) < 0.1
    zs = np.where(small, z, 0.0)
    series = 0.5 + zs * (1 / 3 + zs * (1 / 8 + zs * (1 / 30 + zs * (1 / 144 + zs * (1 / 840 + zs / 5760)))))
    zl = np.where(small, 1.0, z)
    direct = (zl * np.exp(zl) - np.expm1(zl)) / (zl * zl)
    return np.where(small, series, direct)


def zoh_coefficients(delta, A, mode=ZOH, with_grad=False):
    """Return ``A_bar`` and ``b_scale`` with ``B_bar = b_scale * B``.

    With ``with_grad`` also return d(A_bar)/d(delta), d(A_bar)/d(A),
    d(b_scale)/d(delta) and d(b_scale)/d(A).
    """
    delta = np.asarray(delta, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    z = delta * A
    abar = np.exp(z)
    if mode == SIMPLE:
        bscale = delta * np.ones_like(z)
        if not with_grad:
            return abar, bscale
        return abar, bscale, A * abar, delta * abar, np.ones_like(z), np.zeros_like(z)
    small = np.abs(z) < SERIES_THRESHOLD
    safe_z = np.where(small, 1.0, z)
    exact = delta * np.expm1(safe_z) / safe_z
    series = delta * (1.0 + 0.5 * z)
    bscale = np.where(small, series, exact)
    if not with_grad:
        return abar, bscale
    d_delta = np.where(small, 1.0 + z, abar)
    d_A = delta * delta * np.where(small, 0.5, _psi(z))
    return abar, bscale, A * abar, delta * abar, d_delta, d_A


def scan_forward(u, delta, A, B, C, h0=None, mode=ZOH):
    S, T, D = u.shape
    N = A.shape[1]
    h = np.zeros((S, D, N)) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty((S, T, D))
    for t in range(T):
        dt = delta[:, t, :, None]
        abar, bscale = zoh_coefficients(dt, A[None], mode)
        h = abar * h + bscale * B[:, t, None, :] * u[:, t, :, None]
        y[:, t] = np.einsum("sdn,sn->sd", h, C[:, t])
    return y, h


def scan_backward(u, delta, A, B, C, h0, gy, ghT=None, mode=ZOH):
    S, T, D = u.shape
    N = A.shape[1]
    hs = np.empty((T + 1, S, D, N))
    hs[0] = 0.0 if h0 is None else h0
    coeffs = []
    for t in range(T):
        c = zoh_coefficients(delta[:, t, :, None], A[None], mode, with_grad=True)
        coeffs.append(c)
        abar, bscale = c[0], c[1]
        hs[t + 1] = abar * hs[t] + bscale * B[:, t, None, :] * u[:, t, :, None]

    gu = np.empty_like(u)
    gdelta = np.empty_like(delta)
    gA = np.zeros_like(A)
    gB = np.empty_like(B)
    gC = np.empty_like(C)
    gh = np.zeros((S, D, N)) if ghT is None else np.array(ghT, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        gC[:, t] = np.einsum("sd,sdn->sn", gy[:, t], hs[t + 1])
        gh = gh + gy[:, t, :, None] * C[:, t, None, :]
        abar, bscale, da_dd, da_dA, db_dd, db_dA = coeffs[t]
        Bt = B[:, t, None, :]
        ut = u[:, t, :, None]
        gu[:, t] = (gh * bscale * Bt).sum(-1)
        g_bbar = gh * ut
        g_abar = gh * hs[t]
        gdelta[:, t] = (g_abar * da_dd + g_bbar * Bt * db_dd).sum(-1)
        gA += (g_abar * da_dA + g_bbar * Bt * db_dA).sum(0)
        gB[:, t] = (g_bbar * bscale).sum(1)
        gh = gh * abar
    return gu, gdelta, gA, gB, gC, gh
