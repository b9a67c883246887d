import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowmark.errors import NonFiniteError, ShapeError
from shadowmark.nn import (
    LAYER_KINDS,
    Adam,
    AdamState,
    BatchReshape,
    Chain,
    Conv2d,
    Dense,
    LeakyReLU,
    Network,
    ReLU,
    Sigmoid,
    Tanh,
    TransposeConv2d,
    apply_update,
    check_loss,
    compute_gradients,
)

from gradcases import GRAD_TOL, worst_gradient_error


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_gradients_match_finite_differences(kind):
    worst = worst_gradient_error(kind)
    assert worst < GRAD_TOL, f"{kind}: max relative error {worst:.2e}"


def test_layer_vocabulary_is_the_declared_nine():
    assert set(LAYER_KINDS) == {
        "dense",
        "conv2d",
        "transpose-conv2d",
        "upsample-nearest",
        "relu",
        "leaky-relu",
        "tanh",
        "sigmoid",
        "batch-reshape",
    }


def test_identity_reshape_network():
    net = Network([BatchReshape((2, 3))], (2, 3))
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.testing.assert_array_equal(net.forward(t), t)


def test_dense_identity_weights():
    net = Network([Dense(4, 4)], (4,), params={"0.dense.weight": np.eye(4), "0.dense.bias": np.zeros(4)})
    v = np.array([1.0, -2.0, 3.5, 0.25], dtype=np.float32)
    np.testing.assert_array_equal(net.forward(v), v)


def test_one_by_one_conv_doubles():
    net = Network(
        [Conv2d(1, 1, 1, 1, 0)],
        (1, 4, 4),
        params={"0.conv2d.weight": np.full((1, 1, 1, 1), 2.0), "0.conv2d.bias": np.zeros(1)},
    )
    np.testing.assert_array_equal(net.forward(np.ones((1, 4, 4), np.float32)), np.full((1, 4, 4), 2.0))


def test_conv_matches_direct_correlation():
    rng = np.random.default_rng(0)
    net = Network([Conv2d(2, 3, 3, 2, 1)], (2, 5, 5), seed=3)
    x = rng.standard_normal((2, 5, 5)).astype(np.float32)
    W = net.parameter("0.conv2d.weight").data.astype(np.float64)
    b = net.parameter("0.conv2d.bias").data.astype(np.float64)
    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[o, i, j] = np.sum(W[o] * xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]) + b[o]
    np.testing.assert_allclose(net.forward(x), ref, rtol=1e-5, atol=1e-5)


def test_transpose_conv_is_adjoint_of_conv():
    # <conv(x), y> == <x, tconv(y)> with shared weights and zero biases
    rng = np.random.default_rng(1)
    W = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)  # conv: (out=3, in=2)
    conv = Network([Conv2d(2, 3, 4, 2, 1)], (2, 8, 8), params={"0.conv2d.weight": W, "0.conv2d.bias": np.zeros(3)})
    tconv = Network(
        [TransposeConv2d(3, 2, 4, 2, 1)],
        (3, 4, 4),
        params={"0.transpose-conv2d.weight": W, "0.transpose-conv2d.bias": np.zeros(2)},
    )
    x = rng.standard_normal((2, 8, 8)).astype(np.float32)
    y = rng.standard_normal((3, 4, 4)).astype(np.float32)
    lhs = float(np.sum(conv.forward(x).astype(np.float64) * y))
    rhs = float(np.sum(x.astype(np.float64) * tconv.forward(y)))
    assert lhs == pytest.approx(rhs, rel=1e-4)


def test_shape_mismatch_names_expected_and_actual():
    net = Network([Dense(3, 2)], (3,))
    with pytest.raises(ShapeError, match=r"\(3,\).*\(4,\)|\(4,\).*\(3,\)"):
        net.forward(np.zeros(4, np.float32))


def test_incompatible_layers_rejected_at_construction():
    with pytest.raises(ShapeError):
        Network([Dense(3, 5), Dense(4, 2)], (3,))


def test_non_finite_activation_reports_layer_index():
    net = Network([Dense(2, 2), Tanh()], (2,), params={"0.dense.weight": np.full((2, 2), 3e38), "0.dense.bias": np.zeros(2)})
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="layer 0"):
        net.forward(np.array([10.0, 10.0], np.float32))


def test_constant_loss_gives_zero_gradients():
    net = Network([Dense(3, 2), ReLU(), Dense(2, 1)], (3,), seed=1)
    value, grads = compute_gradients(net, lambda y: (0.0, np.zeros_like(y)), np.ones((2, 3), np.float32))
    assert value == 0.0
    assert set(grads) == set(net.trainable_names())
    assert all(not g.any() for g in grads.values())


def test_sum_of_dense_output_gradient_is_outer_product():
    net = Network([Dense(3, 2)], (3,), seed=5)
    v = np.array([[1.0, -2.0, 0.5]], np.float32)
    _, grads = compute_gradients(net, lambda y: (float(y.sum()), np.ones_like(y)), v)
    np.testing.assert_allclose(grads["0.dense.weight"], np.outer(v[0], np.ones(2)))
    np.testing.assert_allclose(grads["0.dense.bias"], np.ones(2))


def test_loss_must_be_finite_scalar():
    with pytest.raises(ShapeError):
        check_loss(np.ones(3))
    with pytest.raises(NonFiniteError):
        check_loss(float("nan"))
    net = Network([Dense(2, 1)], (2,))
    with pytest.raises(NonFiniteError):
        compute_gradients(net, lambda y: (np.inf, np.zeros_like(y)), np.ones((1, 2), np.float32))


def test_frozen_parameters_get_no_gradient_entry_and_are_read_only():
    net = Network([Dense(2, 2)], (2,)).freeze()
    _, grads = compute_gradients(net, lambda y: (float(y.sum()), np.ones_like(y)), np.ones((1, 2), np.float32))
    assert grads == {}
    with pytest.raises(ValueError):
        net.parameter("0.dense.weight").data[0, 0] = 1.0


def test_forward_and_gradients_are_bit_stable():
    net = Network([Conv2d(1, 2), ReLU(), BatchReshape((2 * 16,)), Dense(32, 3)], (1, 4, 4), seed=2)
    x = np.random.default_rng(0).standard_normal((3, 1, 4, 4)).astype(np.float32)
    loss = lambda y: (float(np.sum(y * y)), 2 * y)  # noqa: E731
    a = compute_gradients(net, loss, x)
    b = compute_gradients(net, loss, x)
    assert a[0] == b[0]
    for name in a[1]:
        np.testing.assert_array_equal(a[1][name], b[1][name])
    np.testing.assert_array_equal(net.forward(x), net.forward(x))


def test_forward_does_not_mutate_parameters():
    net = Network([Dense(4, 4), Sigmoid()], (4,), seed=9)
    before = net.digest()
    net.forward(np.ones((5, 4), np.float32))
    assert net.digest() == before


def test_same_seed_same_parameters():
    a = Network([Dense(5, 3)], (5,), seed=11)
    b = Network([Dense(5, 3)], (5,), seed=11)
    c = Network([Dense(5, 3)], (5,), seed=12)
    assert a.digest() == b.digest() != c.digest()


def test_spec_round_trip_reproduces_outputs():
    net = Network([Conv2d(1, 2, 3, 2, 1), LeakyReLU(0.1), TransposeConv2d(2, 1), Tanh(0.5, 0.5)], (1, 8, 8), seed=4)
    clone = Network.from_spec(net.spec(), net.input_shape, params=net.state_dict())
    x = np.random.default_rng(1).random((2, 1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(x), clone.forward(x))


# -- Adam -------------------------------------------------------------------------


def adam_reference(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam in float64 over a list of per-step gradients."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_matches_reference_recursion():
    net = Network([Dense(3, 2)], (3,), seed=0)
    rng = np.random.default_rng(0)
    start = net.parameter("0.dense.weight").data.astype(np.float64).copy()
    seq = [rng.standard_normal((3, 2)) for _ in range(25)]
    opt = Adam(net.parameters(), lr=1e-2)
    for g in seq:
        opt.step({"0.dense.weight": g.astype(np.float32), "0.dense.bias": np.zeros(2, np.float32)})
    np.testing.assert_allclose(net.parameter("0.dense.weight").data, adam_reference(start, seq, 1e-2), rtol=1e-5, atol=1e-6)


def test_adam_defaults():
    s = AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps) == (2e-4, 0.9, 0.999, 1e-8)


def test_zero_gradient_step_leaves_parameters():
    net = Network([Dense(3, 2)], (3,), seed=0)
    before = net.digest()
    opt = Adam(net.parameters())
    for _ in range(3):
        opt.step({n: np.zeros(net.parameter(n).shape, np.float32) for n in net.trainable_names()})
    assert net.digest() == before


def test_constant_gradient_moves_against_its_sign():
    net = Network([Dense(2, 2)], (2,), seed=0)
    w0 = net.parameter("0.dense.weight").data.copy()
    g = np.array([[1.0, -1.0], [2.0, -0.5]], np.float32)
    opt = Adam(net.parameters(), lr=1e-3)
    for _ in range(50):
        opt.step({"0.dense.weight": g, "0.dense.bias": np.zeros(2, np.float32)})
    delta = net.parameter("0.dense.weight").data - w0
    assert np.all(np.sign(delta) == -np.sign(g))


def test_missing_gradient_rejected():
    net = Network([Dense(2, 2)], (2,))
    with pytest.raises(KeyError, match="0.dense.bias"):
        apply_update(net.parameters(), {"0.dense.weight": np.zeros((2, 2), np.float32)}, AdamState())


def test_frozen_network_unchanged_by_updates():
    net = Network([Dense(2, 2)], (2,)).freeze()
    before = net.digest()
    state = AdamState(lr=1.0)
    for _ in range(10):
        apply_update(net.parameters(), {"0.dense.weight": np.ones((2, 2), np.float32)}, state)
    assert net.digest() == before


def test_chain_backprop_matches_single_network():
    rng = np.random.default_rng(3)
    a = Network([Dense(4, 5), Tanh()], (4,), seed=1)
    b = Network([Dense(5, 2)], (5,), seed=2)
    joint = Network([Dense(4, 5), Tanh(), Dense(5, 2)], (4,), params={
        "0.dense.weight": a.parameter("0.dense.weight").data,
        "0.dense.bias": a.parameter("0.dense.bias").data,
        "2.dense.weight": b.parameter("0.dense.weight").data,
        "2.dense.bias": b.parameter("0.dense.bias").data,
    })
    x = rng.standard_normal((3, 4)).astype(np.float32)
    chain = Chain(a, b)
    y, tapes = chain.forward_with_tape(x)
    ga, gb = chain.backward(tapes, np.ones_like(y))
    _, gj = compute_gradients(joint, lambda y: (float(y.sum()), np.ones_like(y)), x)
    np.testing.assert_allclose(ga["0.dense.weight"], gj["0.dense.weight"], rtol=1e-5)
    np.testing.assert_allclose(gb["0.dense.weight"], gj["2.dense.weight"], rtol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
def test_dense_forward_is_affine(n, d, seed):
    rng = np.random.default_rng(seed)
    net = Network([Dense(d, 3)], (d,), seed=seed)
    x = rng.standard_normal((n, d)).astype(np.float32)
    W = net.parameter("0.dense.weight").data.astype(np.float64)
    b = net.parameter("0.dense.bias").data.astype(np.float64)
    np.testing.assert_allclose(net.forward(x), x @ W + b, rtol=1e-5, atol=1e-5)
