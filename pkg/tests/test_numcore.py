import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from evforecast import numcore as nc
from evforecast.numcore import NonFiniteError, Tape, Tensor
from gradcheck import numeric_grad, relative_error


def test_primitive_examples():
    np.testing.assert_allclose(nc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(nc.layer_norm(Tensor([1.0, 3.0])).data, [-1.0, 1.0], atol=1e-5)
    A = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_allclose(nc.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)


def test_backward_examples():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = nc.sum(w * w)
    np.testing.assert_allclose(nc.backward(tape, loss, [w])[0], [2.0, 4.0])
    x = Tensor(0.0, requires_grad=True)
    with Tape() as tape:
        y = nc.sigmoid(x)
    assert nc.backward(tape, y, [x])[0] == pytest.approx(0.25)


def test_disconnected_gets_zero_and_scalar_required():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([[3.0]], requires_grad=True)
    with Tape() as tape:
        loss = nc.sum(a)
        vec = a * 2.0
    g = nc.backward(tape, loss, [a, b])
    np.testing.assert_array_equal(g[1], np.zeros((1, 1)))
    with pytest.raises(ValueError):
        nc.backward(tape, vec, [a])


def test_errors():
    with pytest.raises(ValueError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        nc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        nc.mul(Tensor([1e308]), Tensor([10.0]))


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 3.0


def _mlp_params(rng):
    return {
        "W1": rng.normal(size=(6, 8)) * 0.5, "b1": rng.normal(size=8) * 0.1,
        "W2": rng.normal(size=(8, 8)) * 0.5, "b2": rng.normal(size=8) * 0.1,
        "W3": rng.normal(size=(8, 1)) * 0.5, "b3": rng.normal(size=1) * 0.1,
    }


def _mlp_loss(p, X, y):
    h = nc.tanh(X @ p["W1"] + p["b1"])
    h = nc.relu(h @ p["W2"] + p["b2"])
    out = nc.reshape(nc.sigmoid(h @ p["W3"] + p["b3"]), (len(y),))
    d = out - Tensor(y)
    return nc.mean(d * d)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    X, y = Tensor(rng.normal(size=(10, 6))), rng.normal(size=10)
    raw = _mlp_params(rng)
    params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
    with Tape() as tape:
        loss = _mlp_loss(params, X, y)
    grads = dict(zip(params, nc.backward(tape, loss, list(params.values()))))

    def f(arrs):
        return float(_mlp_loss({k: Tensor(v) for k, v in arrs.items()}, X, y).data)

    for name in raw:
        num, idx = numeric_grad(f, raw, name)
        assert relative_error(grads[name].ravel()[idx], num) < 1e-4, name


def test_composite_ops_gradients():
    rng = np.random.default_rng(7)
    raw = {"x": rng.normal(size=(3, 4, 5)), "w": rng.normal(size=(5, 5))}

    def build(p):
        a = nc.softmax(p["x"] @ p["w"], axis=-1)
        b = nc.layer_norm(nc.transpose(a, (0, 2, 1)), axis=-1)
        c = nc.concat([b, nc.reshape(p["x"], (3, 5, 4))], axis=-1)
        return nc.mean(nc.sum(c[:, 1:, :] * c[:, 1:, :], axis=1))

    params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
    with Tape() as tape:
        loss = build(params)
    grads = dict(zip(params, nc.backward(tape, loss, list(params.values()))))
    for name in raw:
        num, idx = numeric_grad(lambda a: float(build({k: Tensor(v) for k, v in a.items()}).data), raw, name)
        assert relative_error(grads[name].ravel()[idx], num) < 1e-4, name


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(x):
    s = nc.softmax(Tensor(x), axis=-1).data
    assert np.all(np.abs(s.sum(axis=-1) - 1) <= 1e-12)


def test_dropout_identity_and_scaling():
    x = Tensor(np.ones((1000,)))
    assert nc.dropout(x, 0.5, train=False).data is not None
    np.testing.assert_array_equal(nc.dropout(x, 0.5, train=False).data, x.data)
    d = nc.dropout(x, 0.5, train=True, rng=nc.rng_stream(0, "dropout")).data
    assert set(np.unique(d)) <= {0.0, 2.0}


def test_adam_examples():
    p = [Tensor([0.0])]
    new, state = nc.adam_step(p, [np.array([1.0])], nc.AdamState())
    step = new[0].data[0]
    assert step == pytest.approx(-1e-3 * 1.0 / (1.0 + 1e-8), rel=1e-12)
    assert step == pytest.approx(-9.99999995e-4, rel=1e-8)
    zero, _ = nc.adam_step(p, [np.array([0.0])], nc.AdamState())
    assert zero[0].data[0] == 0.0
    second, _ = nc.adam_step(new, [np.array([1.0])], state)
    assert second[0].data[0] < new[0].data[0] < 0.0


def test_rng_streams_are_independent_and_deterministic():
    a1 = nc.rng_stream(3, "init").random(5)
    a2 = nc.rng_stream(3, "init").random(5)
    b = nc.rng_stream(3, "dropout").random(5)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2), "s": np.array(1 / 3)}
    nc.save_params(params, tmp_path / "p.txt", {"arch": "x"})
    header, back = nc.load_params(tmp_path / "p.txt")
    assert header == {"arch": "x"}
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
