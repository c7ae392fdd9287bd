import math
import os
import subprocess
import sys

import numpy as np
import pytest

from skelscan import kernels
from skelscan.errors import ConfigError, ContractError, ShapeError
from skelscan.gradcheck import check_gradients
from skelscan.ssm import (SsmParams, causal_conv1d, discretize, scan, selection, selective_scan,
                          selective_scan_chunked)
from skelscan.tensor import Tape, Tensor, precision


def loop_scan(u, delta, A, B, C, h0=None):
    """Scalar unrolled recurrence with exact zero-order hold."""
    S, T, D = u.shape
    N = A.shape[1]
    y = np.zeros((S, T, D))
    for s in range(S):
        for d in range(D):
            h = [0.0 if h0 is None else h0[s, d, n] for n in range(N)]
            for t in range(T):
                acc = 0.0
                for n in range(N):
                    z = delta[s, t, d] * A[d, n]
                    abar = math.exp(z)
                    bbar = (math.expm1(z) / z if z != 0 else 1.0) * delta[s, t, d] * B[s, t, n]
                    h[n] = abar * h[n] + bbar * u[s, t, d]
                    acc += C[s, t, n] * h[n]
                y[s, t, d] = acc
    return y


def softplus(v):
    return np.logaddexp(0.0, v)


def numpy_selection(x, p):
    R, N = p.dt_rank, p.n_state
    proj = x @ p.x_proj.weight.data
    delta = softplus(proj[..., :R] @ p.dt_proj.weight.data + p.dt_proj.bias.data)
    return delta, proj[..., R:R + N], proj[..., R + N:]


def random_case(rng, S, T, D, N):
    u = rng.normal(size=(S, T, D))
    delta = rng.uniform(0.01, 1.0, (S, T, D))
    A = -rng.uniform(0.1, 2.0, (D, N))
    return u, delta, A, rng.normal(size=(S, T, N)), rng.normal(size=(S, T, N))


# discretisation


def test_discretize_hand_case():
    abar, bbar = discretize(np.array([-1.0]), np.array([1.0]), np.array([math.log(2)]))
    assert abar[0] == pytest.approx(0.5, abs=1e-15)
    assert bbar[0] == pytest.approx(0.5, abs=1e-15)


def test_discretize_small_a_limit():
    _, bbar = discretize(np.array([-1e-9]), np.array([1.0]), np.array([0.1]))
    assert bbar[0] == pytest.approx(0.1, abs=1e-9)


def test_discretize_branches_agree_at_threshold(rng):
    A = -rng.uniform(0.1, 2.0, 50)
    delta = 1e-4 / np.abs(A)
    near = delta * (1 + 1e-9)
    _, exact = discretize(A, np.ones(50), near)
    series = near * (1 + near * A / 2)
    assert np.max(np.abs(exact - series)) < 1e-6
    _, inner = discretize(A, np.ones(50), delta * (1 - 1e-9))
    assert np.max(np.abs(inner - exact)) < 1e-6


def test_discretize_rejects_non_positive_delta():
    with pytest.raises(ContractError):
        discretize(np.array([-1.0]), np.array([1.0]), np.array([0.0]))


def test_simple_mode_is_delta_times_b():
    abar, bbar = discretize(np.array([-2.0]), np.array([3.0]), np.array([0.5]), mode="simple")
    assert abar[0] == pytest.approx(math.exp(-1))
    assert bbar[0] == pytest.approx(1.5)


# scan kernel


@pytest.fixture(params=kernels.available())
def backend(request):
    return request.param


def test_scan_non_selective_hand_case(f64, backend):
    # choose delta, A so that A_bar = 0.5 and B_bar = 1
    d = math.log(2.0)
    ones = np.ones((1, 2, 1))
    A = np.array([[-1.0]])
    B = np.full((1, 2, 1), 1.0 / 0.5)  # B_bar = 0.5 * B
    y = scan(Tensor(ones), Tensor(ones * d), Tensor(A), Tensor(B), Tensor(np.ones((1, 2, 1))), backend=backend)
    np.testing.assert_allclose(y.data.ravel(), [1.0, 1.5], atol=1e-14)


def test_scan_t1_base_case(f64, rng, backend):
    u, delta, A, B, C = random_case(rng, 2, 1, 3, 4)
    y = scan(*map(Tensor, (u, delta, A, B, C)), backend=backend).data
    z = delta[:, 0, :, None] * A[None]
    bbar = np.expm1(z) / A[None] * B[:, 0, None, :]
    expect = np.einsum("sn,sdn->sd", C[:, 0], bbar) * u[:, 0]
    np.testing.assert_allclose(y[:, 0], expect, atol=1e-13)


def test_scan_matches_loop_oracle(f64, rng, backend):
    u, delta, A, B, C = random_case(rng, 2, 16, 4, 3)
    y = scan(*map(Tensor, (u, delta, A, B, C)), backend=backend).data
    assert np.max(np.abs(y - loop_scan(u, delta, A, B, C))) < 1e-10


def test_scan_with_initial_state(f64, rng, backend):
    u, delta, A, B, C = random_case(rng, 2, 5, 3, 2)
    h0 = rng.normal(size=(2, 3, 2))
    y, hT = scan(*map(Tensor, (u, delta, A, B, C)), h0=Tensor(h0), return_state=True, backend=backend)
    assert np.max(np.abs(y.data - loop_scan(u, delta, A, B, C, h0))) < 1e-10
    assert hT.shape == (2, 3, 2)


def test_backends_agree(f64, rng):
    if len(kernels.available()) < 2:
        pytest.skip("compiled extension not built")
    u, delta, A, B, C = random_case(rng, 3, 40, 5, 4)
    args = [Tensor(a, requires_grad=True) for a in (u, delta, A, B, C)]
    grads = {}
    ys = {}
    for name in ("python", "compiled"):
        for a in args:
            a.zero_grad()
        with Tape() as tape:
            y = scan(*args, backend=name)
            (y * y).sum().backward()
        tape.clear()
        ys[name] = y.data
        grads[name] = [a.grad.copy() for a in args]
    np.testing.assert_allclose(ys["python"], ys["compiled"], atol=1e-12)
    for gp, gc in zip(grads["python"], grads["compiled"]):
        np.testing.assert_allclose(gp, gc, atol=1e-10)


def test_scan_gradients(backend, rng):
    u, delta, A, B, C = random_case(rng, 2, 6, 3, 2)
    h0 = rng.normal(size=(2, 3, 2))

    def f(*a):
        return scan(*a[:5], h0=a[5], backend=backend)

    assert check_gradients(f, [u, delta, A, B, C, h0]) < 1e-6


def test_scan_gradient_in_series_branch(rng):
    u, delta, A, B, C = random_case(rng, 1, 4, 2, 2)
    delta = np.full_like(delta, 1e-6)
    f = lambda *a: scan(*a) * 1e4  # noqa: E731
    assert check_gradients(f, [u, delta, A, B, C], wrt=[0, 3, 4]) < 1e-6
    assert check_gradients(f, [u, delta, A, B, C], eps=1e-10, wrt=[1]) < 1e-5


@pytest.mark.parametrize("z", [-3.0, -0.5, -0.1001, -0.0999, -1e-3, -1.01e-4, -0.99e-4, -1e-6])
def test_zoh_coefficient_derivatives(z):
    from skelscan.ssm import zoh_coefficients

    delta, A = 0.7, z / 0.7
    _, _, _, _, d_delta, d_A = zoh_coefficients(np.array([delta]), np.array([A]), with_grad=True)
    # exact b_scale = expm1(delta A) / A; the series branch is only O(z) accurate in d/dA
    f = lambda dl, a: math.expm1(dl * a) / a  # noqa: E731
    h = 1e-6
    fd_delta = (f(delta + h, A) - f(delta - h, A)) / (2 * h)
    fd_A = (f(delta, A + h) - f(delta, A - h)) / (2 * h)
    assert d_delta[0] == pytest.approx(fd_delta, rel=1e-6)
    assert d_A[0] == pytest.approx(fd_A, rel=1e-4 if abs(z) < 1e-4 else 1e-5)


def test_empty_sequence(f64):
    p = SsmParams(4, 3, np.random.default_rng(0))
    assert selective_scan(Tensor(np.zeros((2, 0, 4))), p).shape == (2, 0, 4)


def test_scan_shape_checks():
    with pytest.raises(ShapeError):
        scan(*(Tensor(np.ones(s)) for s in [(1, 2, 3), (1, 2, 3), (3, 2), (1, 2, 3), (1, 2, 2)]))


# selective scan


def test_ssm_params_invariants(f64, rng):
    p = SsmParams(8, 4, rng)
    assert np.all(p.A.data < 0)
    np.testing.assert_allclose(p.A.data[0], -np.arange(1, 5))
    delta, _, _ = selection(Tensor(rng.normal(size=(2, 5, 8)) * 10), p)
    assert np.all(delta.data > 0)
    init = softplus(p.dt_proj.bias.data)
    assert np.all((init >= 1e-3 - 1e-12) & (init <= 1e-1 + 1e-12))
    with pytest.raises(ConfigError):
        SsmParams(0, 4, rng)


def test_selective_scan_matches_oracle(f64, rng):
    p = SsmParams(4, 3, rng)
    x = rng.normal(size=(2, 16, 4))
    delta, B, C = numpy_selection(x, p)
    y = selective_scan(Tensor(x), p).data
    assert np.max(np.abs(y - loop_scan(x, delta, p.A.data, B, C))) < 1e-10


def test_selective_scan_is_input_dependent(f64, rng):
    p = SsmParams(4, 3, rng)
    x = rng.normal(size=(1, 6, 4))
    d1, b1, _ = numpy_selection(x, p)
    d2, b2, _ = numpy_selection(2 * x, p)
    assert not np.allclose(d1, d2) and not np.allclose(b1, b2)


def test_causality(f64, rng):
    p = SsmParams(4, 3, rng)
    x = rng.normal(size=(2, 12, 4))
    base = selective_scan(Tensor(x), p).data
    for t in (0, 5, 11):
        x2 = x.copy()
        x2[:, t] += 3.0
        y2 = selective_scan(Tensor(x2), p).data
        assert np.array_equal(y2[:, :t], base[:, :t])
        assert not np.allclose(y2[:, t:], base[:, t:])


@pytest.mark.parametrize("chunk", [1, 8, 64])
def test_chunked_matches_full(f64, rng, chunk):
    p = SsmParams(4, 3, rng)
    x = Tensor(rng.normal(size=(2, 64, 4)))
    full = selective_scan(x, p).data
    assert np.max(np.abs(selective_scan_chunked(x, p, chunk).data - full)) < 1e-12


def test_chunked_f32_tolerance(rng):
    p = SsmParams(4, 3, rng)
    x = Tensor(rng.normal(size=(2, 30, 4)).astype(np.float32))
    diff = selective_scan_chunked(x, p, 7).data - selective_scan(x, p).data
    assert np.max(np.abs(diff)) < 1e-6


def test_chunk_must_be_positive(rng):
    p = SsmParams(4, 3, rng)
    with pytest.raises(ConfigError):
        selective_scan_chunked(Tensor(np.zeros((1, 4, 4))), p, 0)


def test_chunked_gradients_flow_across_blocks(rng):
    p = SsmParams(3, 2, rng)
    x = rng.normal(size=(1, 9, 3))
    assert check_gradients(lambda t: selective_scan_chunked(t, p, 4), [x]) < 1e-6


def test_long_sequence_stability_bound(f64, rng):
    D, N, T = 3, 4, 4096
    A = -rng.uniform(0.5, 2.0, (D, N))
    delta = np.full((1, T, D), 0.1)
    B = np.ones((1, T, N))
    u = np.ones((1, T, D))
    abar, bbar = discretize(A, 1.0, np.full((D, N), 0.1))
    # C picks one state at a time so y_t = h_t[n]
    for n in range(N):
        C = np.zeros((1, T, N))
        C[..., n] = 1.0
        y = scan(*map(Tensor, (u, delta, A, B, C))).data[0]
        bound = np.abs(bbar[:, n]) / (1 - np.abs(abar[:, n]))
        assert np.all(np.isfinite(y))
        assert np.all(np.abs(y) <= bound * (1 + 1e-12))
        np.testing.assert_allclose(y[-1], bound, rtol=1e-10)


# causal conv


def test_conv_identity_and_delay(f64, rng):
    x = Tensor(rng.normal(size=(2, 5, 3)))
    np.testing.assert_array_equal(causal_conv1d(x, Tensor(np.ones((3, 1))), Tensor(np.zeros(3))).data, x.data)
    out = causal_conv1d(x, Tensor(np.tile([0.0, 1.0], (3, 1)))).data
    np.testing.assert_array_equal(out[:, 0], 0.0)
    np.testing.assert_array_equal(out[:, 1:], x.data[:, :-1])


def test_conv_matches_padding_loop(f64, rng):
    x = rng.normal(size=(2, 10, 3))
    k = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    xp = np.concatenate([np.zeros((2, 3, 3)), x], axis=1)
    expect = np.zeros_like(x)
    for t in range(10):
        for j in range(4):
            expect[:, t] += k[:, j] * xp[:, t + 3 - j]
    expect += b
    out = causal_conv1d(Tensor(x), Tensor(k), Tensor(b)).data
    assert np.max(np.abs(out - expect)) < 1e-12


def test_conv_gradients(rng):
    assert check_gradients(lambda x, k, b: causal_conv1d(x, k, b),
                           [rng.normal(size=(2, 6, 3)), rng.normal(size=(3, 4)), rng.normal(size=3)]) < 1e-5


# backend selection


def test_backend_switch(rng):
    old = kernels.active()
    try:
        kernels.set_backend("python")
        assert kernels.active() == "python"
        with pytest.raises(ValueError):
            kernels.set_backend("gpu")
    finally:
        kernels.set_backend(old)


def test_env_forces_python_fallback():
    env = dict(os.environ, SKELSCAN_BACKEND="python")
    code = ("from skelscan import kernels; import numpy as np; from skelscan.ssm import SsmParams, selective_scan;"
            "from skelscan.tensor import Tensor; p = SsmParams(4, 2, np.random.default_rng(0));"
            "y = selective_scan(Tensor(np.ones((1, 5, 4))), p); print(kernels.active(), kernels.available())")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split()[0] == "python"
    assert "compiled" not in out.stdout


def test_f32_precision_flow(rng):
    with precision("float32"):
        p = SsmParams(4, 3, rng)
        y = selective_scan(Tensor(rng.normal(size=(1, 6, 4))), p)
    assert y.dtype == np.float32
