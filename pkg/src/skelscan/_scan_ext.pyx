# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan kernels; same contract as ``_scan_ref``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, fabs
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double SERIES_THRESHOLD = 1e-4


cdef inline double _psi(double z, double ez) noexcept nogil:
    # (z e^z - (e^z - 1)) / z^2, with ez = e^z
    if fabs(z) < 0.1:
        return 0.5 + z * (1.0 / 3 + z * (1.0 / 8 + z * (1.0 / 30 + z * (1.0 / 144 + z * (1.0 / 840 + z / 5760)))))
    return (z * ez - (ez - 1.0)) / (z * z)


cdef inline void _coeff(double dt, double a, double inv_a, int mode, double* abar, double* bscale,
                        double* db_dd, double* db_da) noexcept nogil:
    cdef double z = dt * a
    cdef double e = exp(z)
    abar[0] = e
    if mode == 1:
        bscale[0] = dt
        db_dd[0] = 1.0
        db_da[0] = 0.0
    elif fabs(z) < SERIES_THRESHOLD:
        bscale[0] = dt * (1.0 + 0.5 * z)
        db_dd[0] = 1.0 + z
        db_da[0] = 0.5 * dt * dt
    else:
        # expm1 only where exp(z) - 1 would cancel
        bscale[0] = (expm1(z) if fabs(z) < 1e-2 else e - 1.0) * inv_a
        db_dd[0] = e
        db_da[0] = dt * dt * _psi(z, e)


def scan_forward(double[:, :, ::1] u, double[:, :, ::1] delta, double[:, ::1] A,
                 double[:, :, ::1] B, double[:, :, ::1] C, h0=None, int mode=0):
    cdef Py_ssize_t S = u.shape[0], T = u.shape[1], D = u.shape[2], N = A.shape[1]
    cdef Py_ssize_t s, t, d, n
    y_arr = np.empty((S, T, D))
    hT_arr = np.zeros((S, D, N)) if h0 is None else np.array(h0, dtype=np.float64, order="C")
    cdef double[:, :, ::1] y = y_arr
    cdef double[:, :, ::1] h = hT_arr
    inv_arr = 1.0 / np.asarray(A)
    cdef double[:, ::1] inv_a = inv_arr
    cdef double acc, ut, dt, abar, bscale, dbd, dba, hv
    with nogil:
        for s in range(S):
            for t in range(T):
                for d in range(D):
                    ut = u[s, t, d]
                    dt = delta[s, t, d]
                    acc = 0.0
                    for n in range(N):
                        _coeff(dt, A[d, n], inv_a[d, n], mode, &abar, &bscale, &dbd, &dba)
                        hv = abar * h[s, d, n] + bscale * B[s, t, n] * ut
                        h[s, d, n] = hv
                        acc = acc + C[s, t, n] * hv
                    y[s, t, d] = acc
    return y_arr, hT_arr


def scan_backward(double[:, :, ::1] u, double[:, :, ::1] delta, double[:, ::1] A,
                  double[:, :, ::1] B, double[:, :, ::1] C, h0, double[:, :, ::1] gy,
                  ghT=None, int mode=0):
    cdef Py_ssize_t S = u.shape[0], T = u.shape[1], D = u.shape[2], N = A.shape[1]
    cdef Py_ssize_t s, t, d, n
    h0_arr = np.zeros((S, D, N)) if h0 is None else np.ascontiguousarray(h0, dtype=np.float64)
    ghT_arr = np.zeros((S, D, N)) if ghT is None else np.ascontiguousarray(ghT, dtype=np.float64)
    cdef double[:, :, ::1] h0v = h0_arr
    cdef double[:, :, ::1] ghTv = ghT_arr

    gu_arr = np.empty((S, T, D))
    gdelta_arr = np.empty((S, T, D))
    gA_arr = np.zeros((D, N))
    gB_arr = np.zeros((S, T, N))
    gC_arr = np.zeros((S, T, N))
    gh0_arr = np.empty((S, D, N))
    cdef double[:, :, ::1] gu = gu_arr
    cdef double[:, :, ::1] gdelta = gdelta_arr
    cdef double[:, ::1] gA = gA_arr
    cdef double[:, :, ::1] gB = gB_arr
    cdef double[:, :, ::1] gC = gC_arr
    cdef double[:, :, ::1] gh0 = gh0_arr

    # per-(s, d) caches of the states and the step coefficients from the recompute pass
    cdef double* hs = <double*> malloc((T + 1) * N * sizeof(double))
    cdef double* ab = <double*> malloc(T * N * sizeof(double))
    cdef double* bs = <double*> malloc(T * N * sizeof(double))
    cdef double* bd = <double*> malloc(T * N * sizeof(double))
    cdef double* ba = <double*> malloc(T * N * sizeof(double))
    cdef double* gh = <double*> malloc(N * sizeof(double))
    if hs == NULL or ab == NULL or bs == NULL or bd == NULL or ba == NULL or gh == NULL:
        free(hs); free(ab); free(bs); free(bd); free(ba); free(gh)
        raise MemoryError()
    inv_arr = 1.0 / np.asarray(A)
    cdef double[:, ::1] inv_a = inv_arr
    cdef double ut, dt, a, abar, bscale, g_y, g_bbar, g_abar, acc_u, acc_d, bt
    cdef Py_ssize_t k
    try:
        with nogil:
            for s in range(S):
                for d in range(D):
                    for n in range(N):
                        hs[n] = h0v[s, d, n]
                        gh[n] = ghTv[s, d, n]
                    for t in range(T):
                        ut = u[s, t, d]
                        dt = delta[s, t, d]
                        for n in range(N):
                            k = t * N + n
                            _coeff(dt, A[d, n], inv_a[d, n], mode, &ab[k], &bs[k], &bd[k], &ba[k])
                            hs[k + N] = ab[k] * hs[k] + bs[k] * B[s, t, n] * ut
                    for t in range(T - 1, -1, -1):
                        ut = u[s, t, d]
                        dt = delta[s, t, d]
                        g_y = gy[s, t, d]
                        acc_u = 0.0
                        acc_d = 0.0
                        for n in range(N):
                            k = t * N + n
                            a = A[d, n]
                            bt = B[s, t, n]
                            abar = ab[k]
                            bscale = bs[k]
                            gC[s, t, n] += g_y * hs[k + N]
                            gh[n] = gh[n] + g_y * C[s, t, n]
                            acc_u = acc_u + gh[n] * bscale * bt
                            g_bbar = gh[n] * ut
                            g_abar = gh[n] * hs[k]
                            acc_d = acc_d + g_abar * a * abar + g_bbar * bt * bd[k]
                            gA[d, n] += g_abar * dt * abar + g_bbar * bt * ba[k]
                            gB[s, t, n] += g_bbar * bscale
                            gh[n] = gh[n] * abar
                        gu[s, t, d] = acc_u
                        gdelta[s, t, d] = acc_d
                    for n in range(N):
                        gh0[s, d, n] = gh[n]
    finally:
        free(hs); free(ab); free(bs); free(bd); free(ba); free(gh)
    return gu_arr, gdelta_arr, gA_arr, gB_arr, gC_arr, gh0_arr
