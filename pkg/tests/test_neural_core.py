import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbl import nn
from mbl.nn import autodiff as ad
from mbl.nn.autodiff import Tensor
from oracles import perturbation_rf


def leaf(x, name=""):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------- causal conv


def conv_oracle(x, w, b, d):
    """Direct summation with left zero padding: y[t] = b + sum_i W[:, :, i] x[t - (k-1-i) d]."""
    t_len, _ = x.shape
    cout, _, k = w.shape
    y = np.zeros((t_len, cout)) + (0 if b is None else b)
    for t in range(t_len):
        for i in range(k):
            src = t - (k - 1 - i) * d
            if src >= 0:
                y[t] += w[:, :, i] @ x[src]
    return y


def test_conv_identity_kernel():
    x = np.arange(12.0).reshape(4, 3)
    w = np.eye(3)[:, :, None]
    out = ad.causal_conv1d(ad.as_tensor(x), ad.as_tensor(w), None, 1)
    np.testing.assert_array_equal(out.value, x)


def test_conv_examples():
    x = np.array([[1.0], [2.0], [3.0]])
    w = np.ones((1, 1, 2))
    out = ad.causal_conv1d(ad.as_tensor(x), ad.as_tensor(w), ad.as_tensor(np.zeros(1)), 1)
    np.testing.assert_array_equal(out.value[:, 0], [1, 3, 5])
    x = np.array([[1.0], [2.0], [3.0], [4.0]])
    out = ad.causal_conv1d(ad.as_tensor(x), ad.as_tensor(w), None, 2)
    np.testing.assert_array_equal(out.value[:, 0], [1, 2, 4, 6])


@given(
    t_len=st.integers(1, 20),
    cin=st.integers(1, 4),
    cout=st.integers(1, 4),
    k=st.integers(1, 3),
    d=st.integers(1, 6),
    seed=st.integers(0, 2**16),
)
def test_conv_matches_direct_summation(t_len, cin, cout, k, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(t_len, cin))
    w = rng.normal(size=(cout, cin, k))
    b = rng.normal(size=cout)
    out = ad.causal_conv1d(ad.as_tensor(x), ad.as_tensor(w), ad.as_tensor(b), d)
    np.testing.assert_allclose(out.value, conv_oracle(x, w, b, d), rtol=1e-12, atol=1e-12)


def test_conv_batched_equals_per_sequence(rng):
    x = rng.normal(size=(3, 10, 2))
    w = rng.normal(size=(4, 2, 2))
    out = ad.causal_conv1d(ad.as_tensor(x), ad.as_tensor(w), None, 3).value
    for b in range(3):
        np.testing.assert_allclose(out[b], conv_oracle(x[b], w, None, 3), atol=1e-12)


def test_conv_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(5, 3\).*\(2, 4, 2\)|\(2, 4, 2\).*\(5, 3\)"):
        ad.causal_conv1d(ad.as_tensor(np.zeros((5, 3))), ad.as_tensor(np.zeros((2, 4, 2))), None, 1)


# ---------------------------------------------------------------- mlp / relu / l2


def test_mlp_examples():
    x = np.array([[0.5, -2.0]])
    specs = nn.mlp_specs(2, (), 2)
    params = {"m.0.weight": Tensor(np.eye(2)), "m.0.bias": Tensor(np.zeros(2))}
    np.testing.assert_array_equal(nn.mlp_forward(x, specs, params, "m").value, x)
    specs = nn.mlp_specs(2, (), 1)
    params = {"m.0.weight": Tensor(np.array([[1.0, 1.0]])), "m.0.bias": Tensor(np.array([1.0]))}
    np.testing.assert_array_equal(nn.mlp_forward(np.array([2.0, 3.0]), specs, params, "m").value, [6.0])


def test_mlp_dimension_mismatch():
    specs = nn.mlp_specs(3, (), 1)
    params = nn.init_dense(np.random.default_rng(0), specs[0], "m.0")
    with pytest.raises(ValueError):
        nn.mlp_forward(np.zeros(2), specs, params, "m")


def test_mlp_hidden_layers_use_relu_last_is_linear():
    specs = nn.mlp_specs(4, (8, 8), 2)
    assert [s.activation for s in specs] == ["relu", "relu", "linear"]


def test_relu():
    np.testing.assert_array_equal(ad.relu(ad.as_tensor(np.array([-1.0, 2.0]))).value, [0.0, 2.0])


def test_l2_normalize_examples():
    np.testing.assert_allclose(ad.l2_normalize(ad.as_tensor(np.array([3.0, 4.0])), 1e-8).value, [0.6, 0.8])
    np.testing.assert_array_equal(ad.l2_normalize(ad.as_tensor(np.zeros(3)), 1e-8).value, np.zeros(3))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_l2_normalize_unit_norm(values):
    v = np.array(values)
    if np.linalg.norm(v) < 1e-6:
        return
    out = ad.l2_normalize(ad.as_tensor(v), 1e-8).value
    assert abs(np.linalg.norm(out) - 1.0) < 1e-6


# ---------------------------------------------------------------- autodiff


def test_backward_quadratic():
    x = leaf([1.0, -2.0, 3.5])
    ad.backward(ad.mul(ad.sum_(ad.square(x)), 0.5))
    np.testing.assert_allclose(x.grad, x.value)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        ad.backward(ad.square(x))


def test_backward_deterministic(rng):
    w = leaf(rng.normal(size=(3, 2, 2)))
    x = rng.normal(size=(12, 2))

    def grads():
        w.zero_grad()
        ad.backward(ad.mean(ad.square(ad.causal_conv1d(ad.as_tensor(x), w, None, 2))))
        return w.grad.copy()

    np.testing.assert_array_equal(grads(), grads())


def test_stop_gradient_forward_and_backward(rng):
    a = leaf(rng.normal(size=5))
    b = leaf(rng.normal(size=5))
    loss = ad.sum_(ad.mul(a, ad.stop_gradient(b)))
    assert loss.value == pytest.approx(float(a.value @ b.value))
    ad.backward(loss)
    np.testing.assert_allclose(a.grad, b.value)
    assert b.grad is None or np.all(b.grad == 0)
    fd = nn.numeric_gradient(lambda: ad.sum_(ad.mul(a, ad.stop_gradient(b))), a)
    np.testing.assert_allclose(fd, b.value, rtol=1e-8)


def test_sg_of_network_output_has_zero_parameter_gradient(rng):
    w = leaf(rng.normal(size=(2, 3)))
    x = rng.normal(size=(4, 3))
    v = leaf(rng.normal(size=2))
    out = ad.stop_gradient(ad.linear(ad.as_tensor(x), w))
    ad.backward(ad.sum_(ad.square(ad.add(out, v))))
    assert w.grad is None or np.all(w.grad == 0)
    assert np.any(v.grad != 0)


OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "square": lambda a, b: ad.square(a),
    "absolute": lambda a, b: ad.absolute(a),
    "relu": lambda a, b: ad.relu(a),
    "softplus": lambda a, b: ad.softplus(a),
    "mean_axis": lambda a, b: ad.mean(a, axis=0),
    "sum_axis": lambda a, b: ad.sum_(a, axis=-1),
    "concat": lambda a, b: ad.concat([a, b], axis=-1),
    "slice_last": lambda a, b: ad.slice_last(a, 1, 3),
    "reshape": lambda a, b: ad.reshape(a, (-1,)),
    "l2_normalize": lambda a, b: ad.l2_normalize(a, 1e-8),
    "gather_frames": lambda a, b: ad.gather_frames(ad.reshape(a, (2, 3, 4)), np.array([0, 1, 1]), np.array([2, 0, 2])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradcheck_each_op(name, rng):
    # keep values away from the kinks of relu / abs
    av = rng.normal(size=(6, 4))
    av = np.where(np.abs(av) < 0.05, 0.3, av)
    a, b = leaf(av), leaf(rng.normal(size=(6, 4)))
    c = rng.normal(size=OPS[name](Tensor(av), Tensor(b.value)).shape)
    err = nn.grad_check(lambda: ad.sum_(ad.mul(OPS[name](a, b), c)), [a, b])
    assert err < 1e-7


def test_gradcheck_linear(rng):
    x = leaf(rng.normal(size=(5, 3)))
    w = leaf(rng.normal(size=(2, 3)))
    bias = leaf(rng.normal(size=2))
    assert nn.grad_check(lambda: ad.sum_(ad.square(ad.linear(x, w, bias))), [x, w, bias]) < 1e-7


def test_gradcheck_conv_stack(rng):
    specs = [nn.ConvLayerSpec(2, 3, 2, 1), nn.ConvLayerSpec(3, 3, 2, 2), nn.ConvLayerSpec(3, 2, 2, 4, "linear")]
    params = {}
    for i, s in enumerate(specs):
        params.update(nn.init_conv(rng, s, f"c.{i}"))
    x = leaf(rng.normal(size=(2, 16, 2)))
    err = nn.grad_check(lambda: ad.mean(ad.square(nn.conv_stack_forward(x, specs, params, "c"))), [x, *params.values()])
    assert err < 1e-4


def test_grad_check_requires_float64():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        nn.grad_check(lambda: ad.sum_(x), [x])


# ---------------------------------------------------------------- receptive field


@pytest.mark.parametrize(
    "layers,expected",
    [([(3, 1)], 3), ([(1, 1), (1, 5)], 1), ([(2, 1), (2, 2), (2, 4)], 8), ([(3, 2), (2, 7)], 12)],
)
def test_receptive_field_formula_and_perturbation(layers, expected, rng):
    specs = [nn.ConvLayerSpec(1 if i == 0 else 8, 8, k, d) for i, (k, d) in enumerate(layers)]
    params = {}
    for i, s in enumerate(specs):
        params.update(nn.init_conv(rng, s, f"c.{i}"))
    forward = lambda x: nn.conv_stack_forward(ad.as_tensor(x), specs, params, "c").value
    assert nn.receptive_field(specs) == expected
    assert perturbation_rf(forward, rng.normal(size=(40, 1))) == expected


def test_receptive_field_empty_raises():
    with pytest.raises(ValueError):
        nn.receptive_field([])


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        nn.ConvLayerSpec(1, 1, 0, 1)
    with pytest.raises(ValueError):
        nn.ConvLayerSpec(1, 1, 2, 0)


def test_grad_check_multi_step_still_catches_wrong_gradient():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    assert nn.grad_check(lambda: ad.sum_(ad.square(x)), [x], h=(1e-5, 1e-6)) < 1e-7
    # an unfrozen stop-gradient halves the analytic gradient relative to the numeric one
    bad = lambda: ad.sum_(ad.add(ad.square(x), ad.stop_gradient(ad.square(x))))
    assert nn.grad_check(bad, [x], h=(1e-5, 1e-6)) > 0.4
