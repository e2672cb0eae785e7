import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinconv import oracle
from spinconv import tensor_core as tc
from spinconv.errors import ConfigError, DimensionError, InputError
from spinconv.layers import (ConvLayer, DropoutLayer, FrpcConvLayer, Mask,
                             Network, NetworkSpec, RpcConvLayer,
                             dropout_forward_standard, sdropout_backward,
                             sdropout_forward, tie_break)


def _mask(bits):
    return Mask(bits=np.asarray(bits, dtype=np.float32), p=0.5)


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

def test_standard_dropout_all_ones_identity():
    y = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    layer = DropoutLayer(p=0.5, rng=np.random.default_rng(1))
    out, _ = dropout_forward_standard(y, layer, True, _mask(np.ones(4)))
    assert np.array_equal(out, y)


def test_standard_dropout_all_zeros():
    y = np.ones((2, 4), np.float32)
    layer = DropoutLayer(p=0.5, rng=np.random.default_rng(1))
    out, _ = dropout_forward_standard(y, layer, True, _mask(np.zeros(4)))
    assert not out.any()


def test_standard_dropout_elementwise():
    y = np.array([[1.0, 2.0, 3.0, 4.0]], np.float32)
    layer = DropoutLayer(p=0.5, rng=np.random.default_rng(1))
    out, _ = dropout_forward_standard(y, layer, True, _mask([1, 0, 1, 0]))
    assert np.array_equal(out, np.array([[1.0, 0.0, 3.0, 0.0]], np.float32))


def test_standard_dropout_inference_passthrough():
    y = np.random.default_rng(2).normal(size=(2, 5)).astype(np.float32)
    layer = DropoutLayer(p=0.5, rng=np.random.default_rng(1))
    out, mask = dropout_forward_standard(y, layer, False)
    assert np.array_equal(out, y)
    assert mask is None


def test_sdropout_elementwise_example():
    y = np.array([[1.0, 2.0, 3.0, 4.0]], np.float32)
    layer = DropoutLayer(p=0.5, mode="split", rng=np.random.default_rng(1))
    y1, y2, _ = sdropout_forward(y, layer, _mask([1, 0, 1, 0]))
    assert np.array_equal(y1, np.array([[1.0, 0.0, 3.0, 0.0]], np.float32))
    assert np.array_equal(y2, np.array([[0.0, 2.0, 0.0, 4.0]], np.float32))


def test_sdropout_degenerate_all_ones():
    y = np.random.default_rng(3).normal(size=(2, 6)).astype(np.float32)
    layer = DropoutLayer(p=0.5, mode="split", rng=np.random.default_rng(1))
    y1, y2, _ = sdropout_forward(y, layer, _mask(np.ones(6)))
    assert np.array_equal(y1, y)
    assert not y2.any()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 32))
def test_sdropout_split_identity_property(seed, n, d):
    rng = np.random.default_rng(seed)
    y = rng.normal(0, 5, (n, d)).astype(np.float32)
    layer = DropoutLayer(p=0.5, mode="split", rng=np.random.default_rng(seed + 1))
    y1, y2, _ = sdropout_forward(y, layer)
    assert np.array_equal(y1 + y2, y)


def test_sdropout_backward_complementary_partition():
    g = np.random.default_rng(4).normal(size=(3, 5)).astype(np.float32)
    m = _mask([1, 0, 0, 1, 1])
    assert np.array_equal(sdropout_backward(g, g, m), g)


def test_sdropout_backward_all_ones_mask():
    g1 = np.random.default_rng(5).normal(size=(2, 4)).astype(np.float32)
    out = sdropout_backward(g1, np.zeros_like(g1), _mask(np.ones(4)))
    assert np.array_equal(out, g1)


def test_sdropout_backward_length_mismatch():
    g = np.zeros((2, 4), np.float32)
    with pytest.raises(DimensionError):
        sdropout_backward(g, g, _mask([1, 0, 1]))


def test_sdropout_backward_toy_loss_finite_differences():
    # two-branch scalar loss: sum(a*y1) + sum(b*y2)
    rng = np.random.default_rng(6)
    y = rng.normal(size=(2, 6))
    a, b = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    m = _mask((rng.random(6) < 0.5).astype(np.float32))
    layer = DropoutLayer(p=0.5, mode="split", rng=np.random.default_rng(1))

    def fn():
        y1, y2, _ = sdropout_forward(y, layer, m)
        return float(np.sum(a * y1) + np.sum(b * y2))

    ana = sdropout_backward(a, b, m)
    num = oracle.finite_difference(fn, y)
    nz = ana != 0
    assert oracle.relative_error(num[nz], ana[nz]).max() <= 1e-4


def test_dropout_rejects_bad_p():
    with pytest.raises(ConfigError):
        DropoutLayer(p=0.0)
    with pytest.raises(ConfigError):
        DropoutLayer(p=1.0)


def test_split_mode_forces_half():
    with pytest.raises(ConfigError):
        DropoutLayer(p=0.3, mode="split")
    DropoutLayer(p=0.5, mode="split")  # fine


def test_mask_rejects_non_binary():
    with pytest.raises(InputError):
        Mask(bits=np.array([0.5, 1.0], np.float32), p=0.5)


def test_mask_complement():
    m = _mask([1, 0, 1])
    assert np.array_equal(m.complement().bits, np.array([0, 1, 0], np.float32))
    assert len(m) == 3


def test_mask_draw_determinism():
    l1 = DropoutLayer(p=0.5, rng=np.random.default_rng(9))
    l2 = DropoutLayer(p=0.5, rng=np.random.default_rng(9))
    for _ in range(5):
        assert np.array_equal(l1.draw_mask(32).bits, l2.draw_mask(32).bits)


# ---------------------------------------------------------------------------
# Tie-breaking
# ---------------------------------------------------------------------------

def test_tie_break_rules():
    assert tie_break(np.array([2.0, 2.0, 2.0])) == 0
    assert tie_break(np.array([0.0, 1.0, 0.5, 0.2, 0.1, 9.0])) == 5
    r = np.zeros(8)
    r[2] = r[6] = 3.0
    assert tie_break(r) == 2


# ---------------------------------------------------------------------------
# RPC / FRPC forward
# ---------------------------------------------------------------------------

def _rpc(in_ch, out_ch, k=3, r=1.0, seed=0, **kw):
    layer = RpcConvLayer(in_ch, out_ch, k, rotate_fraction=r,
                         rng=np.random.default_rng(seed), dtype=np.float64, **kw)
    rng = np.random.default_rng(seed + 100)
    layer.weights[...] = rng.normal(0, 0.8, layer.weights.shape)
    layer.bias[...] = rng.normal(0, 0.3, layer.bias.shape)
    return layer


def test_rpc_symmetric_filter_equals_plain_conv():
    # the pooled path runs a differently shaped matrix product than the
    # plain path, so agreement is to rounding, not bitwise
    layer = _rpc(1, 1)
    layer.weights[...] = 1.0  # rotation-symmetric
    x = np.random.default_rng(1).normal(size=(2, 1, 6, 6))
    y = layer.forward(x, {})
    ref = tc.conv2d_forward(x, layer.conv_params())
    assert np.allclose(y, ref, rtol=1e-13, atol=1e-13)


def test_rpc_fraction_zero_is_plain_conv():
    layer = _rpc(2, 3, r=0.0)
    x = np.random.default_rng(2).normal(size=(1, 2, 5, 5))
    y = layer.forward(x, {})
    ref = tc.conv2d_forward(x, layer.conv_params())
    assert np.array_equal(y, ref)


def test_rpc_matches_explicit_max_over_orientations():
    layer = _rpc(1, 1, seed=3, pad=1)
    x = np.random.default_rng(4).normal(size=(1, 1, 5, 5))
    y = layer.forward(x, {})
    ref = oracle.oriented_conv_reference(x, layer)
    assert np.allclose(y, ref, atol=1e-10)


def test_rpc_dominates_plain_conv_on_selected_filters():
    layer = _rpc(2, 4, r=0.5, seed=5, pad=1)
    x = np.random.default_rng(6).normal(size=(3, 2, 7, 7))
    y = layer.forward(x, {})
    plain = tc.conv2d_forward(x, layer.conv_params())
    for f in layer.rotate_set:
        assert (y[:, f] >= plain[:, f] - 1e-12).all()


def test_rpc_selection_fixed_and_seed_deterministic():
    a = RpcConvLayer(2, 8, 3, rotate_fraction=0.5, rng=np.random.default_rng(7))
    b = RpcConvLayer(2, 8, 3, rotate_fraction=0.5, rng=np.random.default_rng(7))
    assert np.array_equal(a.rotate_set, b.rotate_set)
    assert len(a.rotate_set) == 4  # round(0.5 * 8)
    x = np.random.default_rng(8).normal(size=(1, 2, 5, 5)).astype(np.float32)
    a.forward(x, {})
    before = a.rotate_set.copy()
    a.forward(x, {})
    assert np.array_equal(a.rotate_set, before)


def test_rpc_backward_zero_grad():
    layer = _rpc(1, 2, r=0.5, seed=9, pad=1)
    x = np.random.default_rng(10).normal(size=(1, 1, 5, 5))
    cache = {}
    y = layer.forward(x, cache)
    gx = layer.backward(np.zeros_like(y), cache)
    assert not gx.any()
    assert not layer.grads["weights"].any()
    assert not layer.grads["bias"].any()


def test_rpc_backward_symmetric_filter_equals_plain_conv():
    layer = _rpc(1, 1, seed=11, pad=1)
    layer.weights[...] = 1.0
    plain = ConvLayer(1, 1, 3, pad=1, dtype=np.float64)
    plain.weights[...] = 1.0
    plain.bias[...] = layer.bias
    x = np.random.default_rng(12).normal(size=(2, 1, 6, 6))
    g = np.random.default_rng(13).normal(size=(2, 1, 6, 6))
    c1, c2 = {}, {}
    layer.forward(x, c1)
    plain.forward(x, c2)
    gx1 = layer.backward(g, c1)
    gx2 = plain.backward(g, c2)
    assert np.allclose(gx1, gx2, atol=1e-12)
    assert np.allclose(layer.grads["weights"], plain.grads["weights"], atol=1e-12)
    assert np.allclose(layer.grads["bias"], plain.grads["bias"], atol=1e-12)


def test_rpc_backward_stale_cache():
    from spinconv.errors import ConsistencyError
    layer = _rpc(1, 1, seed=14, pad=1)
    x = np.random.default_rng(15).normal(size=(1, 1, 5, 5))
    with pytest.raises(ConsistencyError):
        layer.backward(np.zeros((1, 1, 5, 5)), {})


def test_frpc_flip_symmetric_filter_equals_plain_conv():
    layer = FrpcConvLayer(1, 1, 3, rotate_fraction=0.0, flip_fraction=1.0,
                          rng=np.random.default_rng(16), dtype=np.float64)
    w = np.array([[[1.0, 2.0, 1.0], [3.0, 4.0, 3.0], [5.0, 6.0, 5.0]]])
    ax = layer.flip_axes[int(layer.flip_set[0])]
    if ax == "up_down":
        w = w.transpose(0, 2, 1).copy()
    layer.weights[0] = w
    layer.bias[...] = 0.5
    x = np.random.default_rng(17).normal(size=(1, 1, 6, 6))
    y = layer.forward(x, {})
    ref = tc.conv2d_forward(x, layer.conv_params())
    # same rounding caveat as the rotation-symmetric case above
    assert np.allclose(y, ref, rtol=1e-13, atol=1e-13)


def test_frpc_zero_fractions_is_plain_conv():
    layer = FrpcConvLayer(2, 3, 3, rotate_fraction=0.0, flip_fraction=0.0,
                          rng=np.random.default_rng(18), dtype=np.float64)
    layer.weights[...] = np.random.default_rng(19).normal(size=layer.weights.shape)
    x = np.random.default_rng(20).normal(size=(1, 2, 5, 5))
    assert np.array_equal(layer.forward(x, {}),
                          tc.conv2d_forward(x, layer.conv_params()))


def test_frpc_matches_two_way_max():
    from spinconv.kernel_transforms import flip_kernel
    layer = FrpcConvLayer(1, 1, 3, rotate_fraction=0.0, flip_fraction=1.0,
                          rng=np.random.default_rng(21), dtype=np.float64)
    layer.weights[...] = np.random.default_rng(22).normal(size=layer.weights.shape)
    layer.bias[...] = 0.0
    ax = layer.flip_axes[int(layer.flip_set[0])]
    x = np.random.default_rng(23).normal(size=(2, 1, 6, 6))
    y = layer.forward(x, {})
    a = tc.conv2d_forward(x, tc.ConvParams(weights=layer.weights, bias=layer.bias))
    flipped = flip_kernel(layer.weights, ax)
    b = tc.conv2d_forward(x, tc.ConvParams(weights=flipped, bias=layer.bias))
    assert np.allclose(y, np.maximum(a, b), atol=1e-12)


def test_frpc_sets_disjoint_and_axes_alternate():
    layer = FrpcConvLayer(2, 8, 3, rotate_fraction=0.25, flip_fraction=0.5,
                          rng=np.random.default_rng(24))
    assert np.intersect1d(layer.rotate_set, layer.flip_set).size == 0
    assert len(layer.rotate_set) == 2
    assert len(layer.flip_set) == 4
    axes = list(layer.flip_axes.values())
    assert axes.count("left_right") == 2 and axes.count("up_down") == 2


def test_oriented_fractions_validated():
    with pytest.raises(ConfigError):
        RpcConvLayer(1, 4, 3, rotate_fraction=1.2, rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        FrpcConvLayer(1, 4, 3, rotate_fraction=0.75, flip_fraction=0.5,
                      rng=np.random.default_rng(0))


def test_param_count_invariance():
    for k in (3, 5):
        plain = ConvLayer(3, 16, k)
        rpc = RpcConvLayer(3, 16, k, rotate_fraction=0.5,
                           rng=np.random.default_rng(25))
        frpc = FrpcConvLayer(3, 16, k, rotate_fraction=0.25, flip_fraction=0.25,
                             rng=np.random.default_rng(26))
        assert rpc.param_count() == plain.param_count()
        assert frpc.param_count() == plain.param_count()


def test_rpc_90_degree_equivariance_quick():
    layer = _rpc(1, 1, seed=27, pad=1)
    x = np.random.default_rng(28).normal(size=(1, 1, 9, 9))
    y = layer.forward(x, {})
    xr = np.rot90(x, k=-1, axes=(-2, -1)).copy()
    yr = layer.forward(xr, {})
    err = oracle.relative_error(np.rot90(y, k=-1, axes=(-2, -1)), yr)
    assert err.max() <= 1e-5


def test_rpc_selected_indices_property():
    layer = RpcConvLayer(1, 8, 3, rotate_fraction=0.5,
                         rng=np.random.default_rng(29))
    assert np.array_equal(layer.selected_indices, layer.rotate_set)


# ---------------------------------------------------------------------------
# Network container
# ---------------------------------------------------------------------------

def _tiny_net():
    from spinconv.training import init_weights
    spec = NetworkSpec(input_shape=(1, 8, 8), layers=[
        {"kind": "conv", "out_channels": 2, "kernel": 3, "pad": 1},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "fc", "out_features": 8},
        {"kind": "dropout", "p": 0.5, "mode": "split"},
        {"kind": "fc", "out_features": 3},
    ])
    return init_weights(spec, seed=0)


def test_network_layer_index_helpers():
    net = _tiny_net()
    assert net.dropout_layers() == [4]
    assert net.split_layers() == [4]


def test_forward_inference_refuses_dropout_layers():
    from spinconv.errors import ConsistencyError
    net = _tiny_net()
    with pytest.raises(ConsistencyError):
        net.forward_inference(np.zeros((1, 1, 8, 8), np.float32))


def test_network_param_count_sums_layers():
    net = _tiny_net()
    total = sum(arr.size for _, _, arr in net.named_params())
    assert net.param_count() == total
