import numpy as np
import pytest
from hypothesis import given, strategies as st

from _gradcheck import check_net_gradients, max_relative_error, net_loss_and_grads, numeric_grad
from scdcf.basis import ScaleGrid, make_scale_basis, make_spatial_basis
from scdcf.errors import ConfigurationError, DimensionError, StateError
from scdcf.filterbank import CoefficientBlock, init_coefficients, synthesize_filters
from scdcf.network import (BatchNorm, JointScaleConv, NetworkSpec, build_network, decomposed_step_flops,
                           first_layer_flops, first_layer_forward, joint_filter_forward,
                           joint_layer_forward_decomposed, joint_layer_forward_naive, naive_step_flops,
                           pad_scale, scale_maxpool)
from scdcf.tensor import FlopCounter, conv2d_same, pad_spatial, conv2d_valid


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def joint_setup(seed, Mi=2, Mo=3, K=5, Ka=2, L=5, La=3, Ns=4, H=9, W=8, sampling="point"):
    r = np.random.default_rng(seed)
    grid = ScaleGrid(1.0, Ns)
    spatial = make_spatial_basis(K, L, grid, sampling=sampling)
    scale = make_scale_basis(Ka, La)
    block = CoefficientBlock(2, r.standard_normal((Mi, Mo, K, Ka)), r.standard_normal(Mo))
    x = r.standard_normal((2, Mi, Ns, H, W))
    return x, block, spatial, scale


# ---------------------------------------------------------------- first layer

def test_first_layer_matches_per_scale_loop(rng):
    grid = ScaleGrid(1.0, 3)
    spatial = make_spatial_basis(6, 5, grid)
    block = CoefficientBlock(1, rng.standard_normal((2, 3, 6)), rng.standard_normal(3))
    x0 = rng.standard_normal((2, 7, 6))
    out = first_layer_forward(x0, block, spatial, activation=None)
    F = synthesize_filters(block, spatial)
    for o in range(3):
        for s in range(3):
            ref = conv2d_same(x0, F[:, o, s]) + block.b[o]
            np.testing.assert_allclose(out[o, s], ref, rtol=1e-10, atol=1e-12)


def test_first_layer_zero_input():
    grid = ScaleGrid(1.0, 3)
    spatial = make_spatial_basis(4, 5, grid)
    block = init_coefficients(0, 1, 1, 3, 4)
    assert not first_layer_forward(np.zeros((1, 6, 6)), block, spatial).any()
    block.b[:] = [0.5, -1.0, 2.0]
    out = first_layer_forward(np.zeros((1, 6, 6)), block, spatial)
    for o, v in enumerate([0.5, 0.0, 2.0]):
        assert np.all(out[o] == v)


def test_first_layer_flops():
    grid = ScaleGrid(1.0, 3)
    spatial = make_spatial_basis(4, 5, grid)
    c = FlopCounter()
    first_layer_forward(np.zeros((2, 6, 7)), init_coefficients(0, 1, 2, 3, 4), spatial, c)
    assert c.count == first_layer_flops(6, 7, 3, 2, 3, 5)


# ---------------------------------------------------------------- joint layer

@pytest.mark.parametrize("padding", ["zero", "replicate"])
@pytest.mark.parametrize("sampling", ["point", "area"])
def test_naive_equals_decomposed(padding, sampling):
    for seed in range(3):
        x, block, spatial, scale = joint_setup(seed, sampling=sampling)
        a = joint_layer_forward_naive(x, block, spatial, scale, padding, activation=None)
        b = joint_layer_forward_decomposed(x, block, spatial, scale, padding, activation=None)
        assert rel(b, a) <= 1e-10


@given(seed=st.integers(0, 2**16), Mi=st.integers(1, 3), Mo=st.integers(1, 3), K=st.integers(1, 9),
       Ka=st.integers(1, 3), L=st.sampled_from([1, 3, 5]), La=st.integers(1, 4), Ns=st.integers(1, 5),
       padding=st.sampled_from(["zero", "replicate"]))
def test_naive_equals_decomposed_property(seed, Mi, Mo, K, Ka, L, La, Ns, padding):
    x, block, spatial, scale = joint_setup(seed, Mi, Mo, K, Ka, L, La, Ns, H=6, W=5)
    a = joint_layer_forward_naive(x, block, spatial, scale, padding)
    b = joint_layer_forward_decomposed(x, block, spatial, scale, padding)
    np.testing.assert_allclose(b, a, rtol=0, atol=1e-10 * max(np.abs(a).max(), 1e-300))


@given(seed=st.integers(0, 2**16), K=st.integers(1, 9), Ka=st.integers(1, 3), L=st.sampled_from([1, 3, 5, 7]),
       padding=st.sampled_from(["zero", "replicate"]))
def test_separable_layer_equals_decomposed(seed, K, Ka, L, padding):
    x, block, spatial, scale = joint_setup(seed, K=K, Ka=Ka, L=L, La=2, H=7, W=6)
    layer = JointScaleConv(block, spatial, scale, padding)
    ref = joint_layer_forward_decomposed(x, block, spatial, scale, padding, activation=None)
    np.testing.assert_allclose(layer.forward(x), ref, rtol=0, atol=1e-12 * np.abs(ref).max())


def test_flop_counts_match_closed_forms():
    x, block, spatial, scale = joint_setup(0)
    B, Mi, Ns, H, W = x.shape
    Mo, K, Ka, L, La = 3, 5, 2, 5, 3
    c = FlopCounter()
    joint_layer_forward_naive(x, block, spatial, scale, "zero", c)
    assert c.count == B * H * W * Ns * Mo * (2 * L * L * La * Mi + La * Mi + Mi + 2)
    assert c.count == B * sum(naive_step_flops(H, W, Ns, Mi, Mo, L, La))
    c.reset()
    joint_layer_forward_decomposed(x, block, spatial, scale, "zero", c)
    assert c.count == B * sum(decomposed_step_flops(H, W, Ns, Mi, Mo, L, La, K, Ka))


def test_flop_ratio_approaches_parameter_ratio():
    K, Ka, L, La = 8, 3, 5, 5
    target = K * Ka / (L * L * La)
    ratios = []
    for M in (16, 64, 256):
        naive = sum(naive_step_flops(16, 16, 9, M, M, L, La))
        dec = sum(decomposed_step_flops(16, 16, 9, M, M, L, La, K, Ka))
        ratios.append(dec / naive)
    assert abs(ratios[-1] - target) / target < 0.1
    assert abs(ratios[-1] - target) < abs(ratios[0] - target)


def test_joint_zero_coefficients_give_bias():
    x, block, spatial, scale = joint_setup(4)
    block.a[:] = 0
    out = joint_layer_forward_decomposed(x, block, spatial, scale, "replicate", activation=None)
    for o in range(block.M_out):
        assert np.all(out[:, o] == block.b[o])


@pytest.mark.parametrize("padding", ["zero", "replicate"])
def test_joint_constant_input_exact(padding):
    # a constant (per channel) input is mapped to an exactly constant output per (channel, scale)
    _, block, spatial, scale = joint_setup(5, Ns=5)
    x = np.broadcast_to(np.array([0.7, -1.3])[None, :, None, None, None], (1, 2, 5, 9, 8)).copy()
    out = JointScaleConv(block, spatial, scale, padding).forward(x)
    assert np.all(out.max(axis=(-2, -1)) == out.min(axis=(-2, -1)))


def test_single_tap_filter_has_no_scale_mixing(rng):
    Mi, Mo, Ns, La, L = 2, 2, 4, 3, 5
    F = np.zeros((Mi, Mo, Ns, La, L, L))
    F[:, :, :, La - 1] = rng.standard_normal((Mi, Mo, Ns, L, L))
    x = rng.standard_normal((1, Mi, Ns, 8, 8))
    out = joint_filter_forward(x, F, np.zeros(Mo), "replicate", activation=None)
    for s in range(Ns):
        for o in range(Mo):
            ref = conv2d_valid(pad_spatial(x[0, :, s], 2, "edge"), F[:, o, s, La - 1])
            np.testing.assert_allclose(out[0, o, s], ref, atol=1e-12)
    # perturbing one input scale channel changes the same output channel only
    x2 = x.copy()
    x2[0, :, 1] += 1.0
    diff = np.abs(joint_filter_forward(x2, F, np.zeros(Mo), "replicate", activation=None) - out)
    changed = diff.max(axis=(0, 1, 3, 4)) > 0
    np.testing.assert_array_equal(changed, [False, True, False, False])


def test_joint_shape_errors():
    x, block, spatial, scale = joint_setup(0)
    with pytest.raises(DimensionError, match="channel"):
        joint_layer_forward_decomposed(x[:, :1], block, spatial, scale, "zero")
    with pytest.raises(DimensionError, match="scale"):
        joint_layer_forward_decomposed(x[:, :, :2], block, spatial, scale, "zero")


# ---------------------------------------------------------------- scale padding

def test_pad_scale_identity_for_one_tap(rng):
    x = rng.standard_normal((2, 1, 4, 4))
    assert pad_scale(x, 1, "zero") is x


def test_pad_scale_modes(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    rep = pad_scale(x, 3, "replicate")
    assert rep.shape == (2, 5, 4, 4)
    np.testing.assert_array_equal(rep[:, 0], x[:, 0])
    np.testing.assert_array_equal(rep[:, 1], x[:, 0])
    np.testing.assert_array_equal(rep[:, 2:], x)
    zero = pad_scale(x, 3, "zero")
    assert not zero[:, :2].any()
    with pytest.raises(ConfigurationError):
        pad_scale(x, 3, "reflect")


# ---------------------------------------------------------------- batch norm

def test_batchnorm_normalises(rng):
    bn = BatchNorm(3, eps=1e-12)
    x = 2.0 + 3.0 * rng.standard_normal((4, 3, 5, 6, 6))
    y = bn.forward(x, training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), 1, atol=1e-6)
    assert np.all(bn.running_var >= 0)


def test_batchnorm_constant_batch():
    y = BatchNorm(2).forward(np.full((3, 2, 4, 5, 5), 1.7), training=True)
    assert np.all(y == 0)


def test_batchnorm_per_scale_statistics(rng):
    bn = BatchNorm(2, N_s=3, mode="per_scale")
    y = bn.forward(rng.standard_normal((4, 2, 3, 5, 5)) + np.arange(3)[None, None, :, None, None], training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 3, 4)), 0, atol=1e-10)


@pytest.mark.parametrize("mode", ["scale_space", "per_scale"])
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(mode, training, rng):
    bn = BatchNorm(2, N_s=3, mode=mode)
    bn.params["gamma"][:] = rng.uniform(0.5, 2, bn.params["gamma"].shape)
    bn.params["beta"][:] = rng.standard_normal(bn.params["beta"].shape)
    bn.running_mean[:] = 0.3
    bn.running_var[:] = 1.7
    x = rng.standard_normal((3, 2, 3, 4, 4))
    w = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(bn.forward(x, training) * w))
    f()
    gx = bn.backward(w)
    grads = dict(bn.grads)
    assert max_relative_error(gx, numeric_grad(f, x), floor=1e-6) < 1e-5
    for k in ("gamma", "beta"):
        assert max_relative_error(grads[k], numeric_grad(f, bn.params[k]), floor=1e-6) < 1e-5


def test_batchnorm_rejects_wrong_channels(rng):
    with pytest.raises(DimensionError):
        BatchNorm(3).forward(rng.standard_normal((2, 2, 4, 4)), training=True)


# ---------------------------------------------------------------- pooling

def test_scale_maxpool():
    x = np.zeros((2, 1, 3, 3))
    x[1, 0, 2, 2] = 5.0
    np.testing.assert_array_equal(scale_maxpool(x)[1], x[1, 0])
    y = np.zeros((1, 4, 3, 3))
    y[0, 2, 1, 1] = 3.0
    assert scale_maxpool(y)[0, 1, 1] == 3.0


def test_scale_maxpool_circular_shift_changes_only_boundaries(rng):
    x = rng.standard_normal((2, 5, 4, 4))
    rolled = np.roll(x, 1, axis=1)
    np.testing.assert_array_equal(scale_maxpool(x), scale_maxpool(rolled))


# ---------------------------------------------------------------- whole networks

def tiny_spec(**kw):
    d = dict(widths=(2, 2), K=4, K_alpha=2, L=5, L_alpha=2, T=0.5, N_s=3, batchnorm=False,
             pool=(True, False), hidden=(), n_classes=3, input_hw=(8, 8))
    d.update(kw)
    return NetworkSpec(**d)


def randomise_biases(net, seed):
    r = np.random.default_rng(seed)
    for k, v in net.parameters().items():
        if k.endswith(".b"):
            v[:] = 0.1 * r.standard_normal(v.shape)


def test_tiny_net_under_200_parameters():
    assert build_network(tiny_spec(), 0).num_params() <= 200


@pytest.mark.parametrize("kind", ["scdcf", "cnn"])
def test_network_gradients(kind):
    net = build_network(tiny_spec(kind=kind, L=3 if kind == "cnn" else 5), 1)
    randomise_biases(net, 2)
    r = np.random.default_rng(3)
    x, labels = r.standard_normal((3, 1, 8, 8)), r.integers(0, 3, 3)
    worst = check_net_gradients(net, x, labels)
    assert max(worst.values()) < 1e-4, worst


def test_network_gradients_with_batchnorm():
    net = build_network(tiny_spec(batchnorm=True), 4)
    randomise_biases(net, 5)
    r = np.random.default_rng(6)
    x, labels = r.standard_normal((4, 1, 8, 8)), r.integers(0, 3, 4)
    worst = check_net_gradients(net, x, labels)
    # the conv bias feeding a batch norm is cancelled by the centring: its
    # gradient is zero and the finite difference is pure round-off
    biases = [f"{i}.b" for i, layer in enumerate(net.layers[:-1])
              if "b" in layer.params and isinstance(net.layers[i + 1], BatchNorm)]
    assert biases
    _, grads = net_loss_and_grads(net, x, labels)
    for name in biases:
        np.testing.assert_allclose(grads[name], 0, atol=1e-12)
        worst.pop(name)
    assert max(worst.values()) < 1e-4, worst


def test_zero_upstream_gives_zero_gradients(rng):
    net = build_network(tiny_spec(), 0)
    net.forward(rng.standard_normal((2, 1, 8, 8)), training=True)
    net.backward(np.zeros((2, 3)))
    assert all(not g.any() for g in net.gradients().values())


def test_bias_gradient_closed_form(rng):
    spec = tiny_spec(n_classes=0, pool=(False, False))
    net = build_network(spec, 0)
    randomise_biases(net, 1)
    x = rng.standard_normal((2, 1, 8, 8))
    out = net.forward(x, training=True)
    up = rng.standard_normal(out.shape)
    net.backward(up)
    g_b = net.gradients()[f"{len(net.layers) - 2}.b"]
    np.testing.assert_allclose(g_b, (up * (out > 0)).sum(axis=(0, 2, 3, 4)), atol=1e-12)


def test_backward_without_forward_is_state_error():
    net = build_network(tiny_spec(), 0)
    with pytest.raises(StateError):
        net.backward(np.zeros((1, 3)))


def test_zero_input_features_constant_per_channel():
    net = build_network(tiny_spec(n_classes=0, widths=(3, 3, 3), pool=(False, True, False)), 2)
    randomise_biases(net, 3)
    for f in net.features(np.zeros((1, 8, 8))):
        flat = f.reshape(f.shape[0], -1)
        assert np.all(flat.max(axis=1) == flat.min(axis=1))


def test_build_is_deterministic():
    a, b = build_network(NetworkSpec(), 3), build_network(NetworkSpec(), 3)
    for k, v in a.parameters().items():
        np.testing.assert_array_equal(v, b.parameters()[k])


def test_he_init_scale():
    spec = NetworkSpec(widths=(4, 6), n_classes=0)
    net = build_network(spec, 0)
    for l, layer in enumerate(l for l in net.layers if hasattr(l, "block")):
        block = layer.block
        F = synthesize_filters(block, net.spatial, net.scale if block.layer > 1 else None)
        fan = block.M_in * spec.L ** 2 * (spec.L_alpha if block.layer > 1 else 1)
        assert np.sqrt(np.mean(F ** 2)) == pytest.approx(np.sqrt(2 / fan))


def test_A_init_and_projection():
    from scdcf.filterbank import compute_A_l
    net = build_network(NetworkSpec(n_classes=0, init="A", init_A=3.0), 0)
    assert all(compute_A_l(b) == pytest.approx(3.0) for b in net.conv_blocks())
    net.project_to_A2()
    assert all(compute_A_l(b) <= 1 + 1e-12 for b in net.conv_blocks())


@pytest.mark.parametrize("bad", [dict(L=4), dict(padding="wrap"), dict(kind="rnn"), dict(widths=()),
                                 dict(pool=(True,)), dict(activation="tanh"), dict(init="xavier"),
                                 dict(N_s=0)])
def test_spec_validation(bad):
    with pytest.raises(ConfigurationError):
        NetworkSpec(**bad)


def test_parameter_ratio_of_joint_layer():
    x, block, spatial, scale = joint_setup(0, Mi=3, Mo=4, K=8, Ka=3, L=5, La=5)
    layer = JointScaleConv(block, spatial, scale, "replicate")
    assert layer.num_params() / layer.num_params_undecomposed() == 0.192
