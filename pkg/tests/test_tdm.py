import numpy as np
import pytest

from skelscan.errors import ConfigError, ContractError
from skelscan.gradcheck import check_gradients, check_module_gradients
from skelscan.tdm import (ScanBranch, ScanLayout, TdmBlock, bidirectional_scan, channel_project,
                          make_scan_sequence, tdm_forward, tdm_param_count, temporal_pool)
from skelscan.tensor import Tensor


def block(C=8, stride=1, seed=0, **kw):
    return TdmBlock(C, np.random.default_rng(seed), stride=stride, n_state=4, **kw)


def swap_halves(x):
    h = x.shape[1] // 2
    return np.concatenate([x[:, h:], x[:, :h]], axis=1)


def zero_mti(b):
    for p in b.mti.parameters():
        p.data[...] = 0.0


# channel projection


def test_projection_zero_input_gives_zero(f64):
    b = block()
    b.proj.bias.data[...] = 0.0
    out = channel_project(Tensor(np.zeros((2, 8, 3, 4))), b)
    assert out.shape == (2, 4, 3, 4)
    np.testing.assert_array_equal(out.data, 0.0)


def test_projection_nonnegative_and_rejects_odd(f64, rng):
    out = channel_project(Tensor(rng.normal(size=(2, 8, 5, 3))), block())
    assert np.all(out.data >= 0)
    with pytest.raises(ConfigError):
        TdmBlock(7, rng)
    with pytest.raises(ConfigError):
        channel_project(Tensor(np.zeros((1, 7, 2, 2))), block())


def test_projection_parameter_economy():
    C = 216
    b = TdmBlock(C, np.random.default_rng(0))
    assert b.proj.num_parameters() == C * (C // 2) + C // 2
    half_paths = 2 * (C // 2) ** 2
    assert half_paths / C ** 2 == 0.5


def test_projection_gradient(f64):
    b = block(C=4)
    H = np.random.default_rng(3).normal(size=(1, 4, 3, 2))
    # keep pre-activations away from the ReLU kink
    b.bn.beta.data[...] = 5.0
    assert check_gradients(lambda x: channel_project(x, b), [H]) < 1e-4
    errs = check_module_gradients(lambda: channel_project(Tensor(H), b).sum(),
                                  {"proj.weight": b.proj.weight, "norm_in.gamma": b.norm_in.gamma})
    assert max(errs.values()) < 1e-4


# scan layouts


def test_t_scan_enumeration(f64):
    # v[joint, time] stored as a single channel
    H = np.array([[11.0, 12.0], [21.0, 22.0]]).T.reshape(1, 1, 2, 2)
    seq = make_scan_sequence(Tensor(H), ScanLayout("T")).data
    assert seq.shape == (2, 2, 1)
    np.testing.assert_array_equal(seq[..., 0], [[11, 12], [21, 22]])


def test_st_scan_enumeration(f64):
    H = np.array([[11.0, 12.0], [21.0, 22.0]]).T.reshape(1, 1, 2, 2)
    seq = make_scan_sequence(Tensor(H), ScanLayout("ST")).data
    np.testing.assert_array_equal(seq.ravel(), [11, 21, 12, 22])
    seq = make_scan_sequence(Tensor(H), ScanLayout("TS")).data
    np.testing.assert_array_equal(seq.ravel(), [11, 12, 21, 22])
    seq = make_scan_sequence(Tensor(H), ScanLayout("S")).data
    np.testing.assert_array_equal(seq[..., 0], [[11, 21], [12, 22]])


@pytest.mark.parametrize("strategy", ["T", "TS", "ST", "S"])
def test_layout_round_trip(f64, rng, strategy):
    x = rng.normal(size=(2, 6, 5, 4))
    lay = ScanLayout(strategy)
    seq = lay.to_sequence(Tensor(x))
    assert seq.shape[:2] == lay.dims(2, 5, 4)
    np.testing.assert_array_equal(lay.from_sequence(seq, 2, 5, 4).data, x)


def test_layout_dims():
    assert ScanLayout("T").dims(2, 5, 3) == (6, 5)
    assert ScanLayout("S").dims(2, 5, 3) == (10, 3)
    assert ScanLayout("TS").dims(2, 5, 3) == (2, 15)
    with pytest.raises(ConfigError):
        ScanLayout("Z")


# block forward


def test_output_shape_stride2():
    b = TdmBlock(64, np.random.default_rng(0), stride=2, n_state=16)
    out = tdm_forward(Tensor(np.random.default_rng(1).normal(size=(2, 64, 64, 25)).astype(np.float32)), b)
    assert out.shape == (2, 64, 32, 25)


@pytest.mark.filterwarnings("ignore:Cycle FC kernel")
@pytest.mark.parametrize("T,stride", [(5, 1), (5, 2), (6, 2), (2, 2)])
def test_output_length_is_ceil(f64, rng, T, stride):
    out = tdm_forward(Tensor(rng.normal(size=(1, 8, T, 3))), block(stride=stride))
    assert out.shape == (1, 8, -(-T // stride), 3)


def test_stride2_needs_two_frames(f64):
    with pytest.raises(ContractError):
        tdm_forward(Tensor(np.ones((1, 8, 1, 3))), block(stride=2))


@pytest.mark.filterwarnings("ignore:Cycle FC kernel")
def test_zero_path_gives_norm_bias(f64, rng):
    b = block()
    for branch in (b.fwd, b.bwd):
        branch.out.weight.data[...] = 0.0
    b.norm_out.beta.data[...] = np.arange(8.0)
    out = tdm_forward(Tensor(rng.normal(size=(1, 8, 4, 3))), b)
    np.testing.assert_allclose(out.data, np.broadcast_to(np.arange(8.0)[None, :, None, None], out.shape),
                               atol=1e-12)


@pytest.mark.parametrize("T", [8, 16])
@pytest.mark.parametrize("stride", [1, 2])
def test_reversal_equivariance_tied_branches(T, stride):
    b = block(C=8, stride=stride, seed=T + stride)
    b.tie_branches()
    zero_mti(b)
    H = np.random.default_rng(T).normal(size=(2, 8, T, 5)).astype(np.float32)
    out = tdm_forward(Tensor(H), b).data
    rev = tdm_forward(Tensor(np.ascontiguousarray(H[:, :, ::-1])), b).data
    np.testing.assert_allclose(rev, swap_halves(out[:, :, ::-1]), atol=1e-6)


def test_untied_branches_are_not_equivariant(f64, rng):
    b = block(C=8)
    zero_mti(b)
    H = rng.normal(size=(1, 8, 8, 3))
    out = tdm_forward(Tensor(H), b).data
    rev = tdm_forward(Tensor(np.ascontiguousarray(H[:, :, ::-1])), b).data
    assert not np.allclose(rev, swap_halves(out[:, :, ::-1]), atol=1e-6)


def test_joint_locality_without_batch_statistics(f64, rng):
    b = block()
    b.eval()
    H = rng.normal(size=(1, 8, 6, 4))
    H2 = H.copy()
    H2[..., 1] = 0.0
    for fuse in (False, True):
        d = np.abs(tdm_forward(Tensor(H2), b, fuse_norm=fuse).data - tdm_forward(Tensor(H), b, fuse_norm=fuse).data)
        per_joint = d.sum(axis=(0, 1, 2))
        assert per_joint[1] > 0
        assert np.all(per_joint[[0, 2, 3]] == 0)


def test_branch_causal_and_anticausal_coverage(f64, rng):
    b = block()
    omega = rng.normal(size=(1, 4, 10, 2))
    yp, ym = (y.data for y in bidirectional_scan(Tensor(omega), b))
    t = 4
    o2 = omega.copy()
    o2[:, :, t] += 1.0
    yp2, ym2 = (y.data for y in bidirectional_scan(Tensor(o2), b))
    assert np.array_equal(yp2[:, :t], yp[:, :t]) and not np.allclose(yp2[:, t:], yp[:, t:])
    assert np.array_equal(ym2[:, t + 1:], ym[:, t + 1:]) and not np.allclose(ym2[:, :t + 1], ym[:, :t + 1])


@pytest.mark.filterwarnings("ignore:Cycle FC kernel")
def test_block_gradients(f64):
    b = block(C=4, stride=2)
    H = np.random.default_rng(5).normal(size=(1, 4, 4, 2))
    b.bn.beta.data[...] = 3.0
    assert check_gradients(lambda x: tdm_forward(x, b), [H]) < 1e-4
    w = Tensor(np.linspace(-1, 1, 16).reshape(1, 4, 2, 2))
    errs = check_module_gradients(lambda: (tdm_forward(Tensor(H), b) * w).sum(), dict(b.named_parameters()))
    assert max(errs.values()) < 1e-4


def test_batch_norm_train_eval_switch(f64, rng):
    b = block()
    H = Tensor(rng.normal(2.0, 1.5, size=(4, 8, 5, 3)))
    before = b.bn.running_mean.copy()
    train_out = tdm_forward(H, b).data
    assert not np.array_equal(before, b.bn.running_mean)
    b.eval()
    snap = b.bn.running_mean.copy()
    eval_out = tdm_forward(H, b).data
    assert np.array_equal(snap, b.bn.running_mean)
    assert not np.allclose(train_out, eval_out)


def test_max_pool_option(f64, rng):
    x = rng.normal(size=(1, 2, 5, 3))
    out = temporal_pool(Tensor(x), 2, "max").data
    np.testing.assert_array_equal(out[:, :, :2], np.maximum(x[:, :, 0:4:2], x[:, :, 1:4:2]))
    np.testing.assert_array_equal(out[:, :, 2], x[:, :, 4])
    assert check_gradients(lambda t: temporal_pool(t, 2, "max"), [x]) < 1e-6
    with pytest.raises(ConfigError):
        temporal_pool(Tensor(x), 3)


@pytest.mark.parametrize("C,scales,expand,n_state,dt_rank", [
    (216, (1, 3, 5), 1.0, 16, None),
    (32, (1, 3, 5), 1.0, 16, None),
    (16, (3,), 2.0, 4, 3),
    (8, (), 1.0, 8, None),
])
def test_param_count_formula(C, scales, expand, n_state, dt_rank):
    b = TdmBlock(C, np.random.default_rng(0), mti_scales=scales, expand=expand, n_state=n_state, dt_rank=dt_rank)
    assert b.num_parameters() == tdm_param_count(C, scales, expand, n_state, dt_rank=dt_rank)


def test_param_count_regression():
    assert tdm_param_count(216) == 144_504


def test_half_width_branches_economy():
    C = 216
    rng = np.random.default_rng(0)
    half = sum(ScanBranch(C // 2, C // 2, 16, 4, rng).num_parameters() for _ in range(2))
    full = ScanBranch(C, C, 16, 4, rng).num_parameters()
    assert half / full <= 0.55
