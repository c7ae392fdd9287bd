import warnings

import numpy as np
import pytest

from skelscan.cycle import CycleFcLayer, MtiModule, channel_offsets, cycle_fc, mti_forward
from skelscan.errors import ConfigError
from skelscan.gradcheck import check_gradients, check_module_gradients
from skelscan.tensor import Tensor


def dense_oracle(H, offsets, W, b, cyclic=True):
    """Materialise the block-sparse (C*T) x (C_out*T) matrix and multiply."""
    B, C, T, N = H.shape
    Cout = W.shape[1]
    M = np.zeros((C * T, Cout * T))
    for c in range(C):
        for t in range(T):
            src = t + offsets[c]
            if not cyclic and not 0 <= src < T:
                continue
            M[c * T + src % T, t::T] += W[c]
    flat = H.transpose(0, 3, 1, 2).reshape(B, N, C * T)
    out = (flat @ M).reshape(B, N, Cout, T) + b[:, None]
    return out.transpose(0, 2, 3, 1)


def make_layer(rng, c_in, c_out, k, **kw):
    return CycleFcLayer(c_in, c_out, k, rng, **kw)


def test_hand_case(f64, rng):
    layer = make_layer(rng, 3, 1, 3)
    layer.weight.data[...] = 1.0
    layer.bias.data[...] = 0.0
    H = np.arange(1.0, 10.0).reshape(1, 3, 3, 1)
    np.testing.assert_array_equal(cycle_fc(Tensor(H), layer).data.ravel(), [15.0, 15.0, 15.0])


def test_k1_is_advanced_linear(f64, rng):
    layer = make_layer(rng, 4, 3, 1)
    H = rng.normal(size=(2, 4, 5, 3))
    advanced = np.roll(H, 1, axis=2)  # frame t reads t - 1
    expect = np.einsum("bctn,co->botn", advanced, layer.weight.data) + layer.bias.data[:, None, None]
    np.testing.assert_allclose(cycle_fc(Tensor(H), layer).data, expect, atol=1e-12)


@pytest.mark.parametrize("k,cyclic", [(3, True), (5, True), (1, True), (3, False), (5, False)])
def test_matches_dense_oracle(f64, rng, k, cyclic):
    layer = make_layer(rng, 8, 8, k, cyclic=cyclic)
    H = rng.normal(size=(2, 8, 6, 5))
    out = cycle_fc(Tensor(H), layer).data
    ref = dense_oracle(H, layer.offsets, layer.weight.data, layer.bias.data, cyclic)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_offset_rules():
    assert list(channel_offsets(6, 3)) == [-1, 0, 1, -1, 0, 1]
    assert sorted(set(channel_offsets(10, 5))) == [-1, 0, 1, 2, 3]
    assert sorted(set(channel_offsets(10, 5, "centered"))) == [-2, -1, 0, 1, 2]
    with pytest.raises(ConfigError):
        channel_offsets(4, 0)
    with pytest.raises(ConfigError):
        channel_offsets(4, 3, "spiral")


def test_kernel_longer_than_sequence_warns(f64, rng):
    layer = make_layer(rng, 5, 5, 5)
    with pytest.warns(UserWarning):
        out = cycle_fc(Tensor(rng.normal(size=(1, 5, 3, 2))), layer)
    assert out.shape == (1, 5, 3, 2)


def test_no_warning_when_kernel_fits(f64, rng):
    layer = make_layer(rng, 5, 5, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cycle_fc(Tensor(rng.normal(size=(1, 5, 3, 2))), layer)


def test_joint_locality(f64, rng):
    layer = make_layer(rng, 6, 6, 3)
    H = rng.normal(size=(1, 6, 5, 4))
    base = cycle_fc(Tensor(H), layer).data
    H2 = H.copy()
    H2[..., 2] += 1.0
    diff = np.abs(cycle_fc(Tensor(H2), layer).data - base).sum(axis=(0, 1, 2))
    assert diff[2] > 0 and np.all(diff[[0, 1, 3]] == 0)


@pytest.mark.parametrize("shift", [1, 2, 5])
def test_cyclic_shift_equivariance(f64, rng, shift):
    layer = make_layer(rng, 8, 8, 5)
    H = rng.normal(size=(2, 8, 7, 3))
    out = cycle_fc(Tensor(H), layer).data
    rolled = cycle_fc(Tensor(np.roll(H, shift, axis=2)), layer).data
    np.testing.assert_allclose(rolled, np.roll(out, shift, axis=2), atol=1e-13)


def test_gradients(f64, rng):
    layer = make_layer(rng, 4, 3, 3)
    H = rng.normal(size=(1, 4, 5, 2))
    assert check_gradients(lambda x: cycle_fc(x, layer), [H]) < 1e-5
    def loss():
        o = cycle_fc(Tensor(H), layer)
        return (o * o).sum()

    errs = check_module_gradients(loss, dict(layer.named_parameters()))
    assert max(errs.values()) < 1e-5


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_parameter_count_independent_of_k(rng, k):
    assert make_layer(rng, 12, 7, k).num_parameters() == 12 * 7 + 7


def test_mti_zero_weights_is_identity(f64, rng):
    mod = MtiModule(6, rng)
    for p in mod.parameters():
        p.data[...] = 0.0
    H = rng.normal(size=(2, 6, 5, 3))
    np.testing.assert_array_equal(mti_forward(Tensor(H), mod).data, H)


def test_mti_single_scale(f64, rng):
    mod = MtiModule(6, rng, scales=(3,))
    H = Tensor(rng.normal(size=(2, 6, 5, 3)))
    expect = H.data + cycle_fc(H, mod.layers[0]).data
    np.testing.assert_array_equal(mti_forward(H, mod).data, expect)


def test_mti_three_scale_sum(f64, rng):
    mod = MtiModule(8, rng)
    assert mod.scales == (1, 3, 5)
    H = rng.normal(size=(2, 8, 6, 3))
    expect = H.copy()
    for layer in mod.layers:
        expect += dense_oracle(H, layer.offsets, layer.weight.data, layer.bias.data)
    np.testing.assert_allclose(mti_forward(Tensor(H), mod).data, expect, atol=1e-12)
    assert len({id(layer.bias) for layer in mod.layers}) == 3


def test_mti_rejects_mismatched_width(rng):
    with pytest.raises(ConfigError):
        MtiModule(6, rng, c_out=4)
    mod = MtiModule(6, rng, scales=(3,))
    mod.layers[0].c_out = 4
    with pytest.raises(ConfigError):
        mti_forward(Tensor(np.zeros((1, 6, 4, 2))), mod)
