import math

import numpy as np
import pytest

from evforecast import neural
from evforecast import numcore as nc
from evforecast.neural import RnnConfig, SequenceRegressor, SequenceSamples, TransformerConfig
from evforecast.numcore import Tape, Tensor
from gradcheck import numeric_grad, relative_error, roundoff, sample_entries

TOL = 1e-4


def tensors(arrays):
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def check_gradients(loss_fn, arrays, rng, per_param=6):
    """loss_fn maps a dict of Tensors to a scalar Tensor."""
    params = tensors(arrays)
    names = sorted(params)
    with Tape() as tape:
        loss = loss_fn(params)
    grads = dict(zip(names, nc.backward(tape, loss, [params[k] for k in names])))
    worst = 0.0
    for name in names:
        entries = sample_entries(rng, arrays[name].size, per_param)
        num, idx = numeric_grad(lambda a: float(loss_fn(tensors(a)).data), arrays, name, entries)
        worst = max(worst, relative_error(grads[name].ravel()[idx], num, roundoff(float(loss.data))))
    return worst


def gru_params(n_in, H, rng=None, zero=False):
    f = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(scale=0.5, size=s))
    return {"W": f(n_in, 3 * H), "U": f(H, 2 * H), "Uc": f(H, H), "b": f(3 * H)}


def lstm_params(n_in, H, rng=None, zero=False):
    f = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(scale=0.5, size=s))
    return {"W": f(n_in, 4 * H), "U": f(H, 4 * H), "b": f(4 * H)}


def encoder_params(d, ff, rng, scale=None):
    s = scale if scale is not None else 1 / math.sqrt(d)
    p = {"ln1_g": 1 + 0.1 * rng.normal(size=d), "ln1_b": 0.1 * rng.normal(size=d),
         "ln2_g": 1 + 0.1 * rng.normal(size=d), "ln2_b": 0.1 * rng.normal(size=d),
         "W1": rng.normal(scale=s, size=(d, ff)), "b1": 0.1 * rng.normal(size=ff),
         "W2": rng.normal(scale=1 / math.sqrt(ff), size=(ff, d)), "b2": 0.1 * rng.normal(size=d)}
    for n in ("q", "k", "v", "o"):
        p["W" + n] = rng.normal(scale=s, size=(d, d))
        p["b" + n] = 0.1 * rng.normal(size=d)
    return p


# -- cells ------------------------------------------------------------------------


def test_gru_closed_forms():
    p = tensors(gru_params(2, 3, zero=True))
    np.testing.assert_array_equal(neural.gru_cell(np.ones((1, 2)), np.ones((1, 3)), p).data, np.full((1, 3), 0.5))
    np.testing.assert_array_equal(neural.gru_cell(np.ones((1, 2)), np.zeros((1, 3)), p).data, np.zeros((1, 3)))
    with pytest.raises(ValueError):
        neural.gru_cell(np.ones((1, 3)), np.ones((1, 3)), p)


def test_gru_matches_reference_gates():
    rng = np.random.default_rng(0)
    n_in, H = 3, 4
    a = gru_params(n_in, H, rng)
    x, h = rng.normal(size=(2, n_in)), rng.normal(size=(2, H))
    sig = lambda v: 1 / (1 + np.exp(-v))
    W, U, Uc, b = a["W"], a["U"], a["Uc"], a["b"]
    z = sig(x @ W[:, :H] + h @ U[:, :H] + b[:H])
    r = sig(x @ W[:, H:2 * H] + h @ U[:, H:] + b[H:2 * H])
    cand = np.tanh(x @ W[:, 2 * H:] + (r * h) @ Uc + b[2 * H:])
    np.testing.assert_allclose(neural.gru_cell(x, h, tensors(a)).data, (1 - z) * h + z * cand, atol=1e-14)


def test_lstm_closed_forms():
    p = tensors(lstm_params(2, 3, zero=True))
    h, c = neural.lstm_cell(np.ones((1, 2)), (np.zeros((1, 3)), np.zeros((1, 3))), p)
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)
    h, c = neural.lstm_cell(np.ones((1, 2)), (np.zeros((1, 3)), np.full((1, 3), 2.0)), p)
    np.testing.assert_allclose(c.data, 1.0, atol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(1.0), atol=1e-15)
    assert h.data[0, 0] == pytest.approx(0.3808, abs=1e-4)


def test_cell_gradients():
    rng = np.random.default_rng(1)
    x, h0, c0 = rng.normal(size=(3, 2)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    R = rng.normal(size=(3, 4))
    err = check_gradients(lambda p: nc.sum(neural.gru_cell(x, h0, p) * Tensor(R)), gru_params(2, 4, rng), rng)
    assert err < TOL

    def lstm_loss(p):
        h, c = neural.lstm_cell(x, (h0, c0), p)
        return nc.sum(h * Tensor(R) + c * c)

    assert check_gradients(lstm_loss, lstm_params(2, 4, rng), rng) < TOL


# -- encoder ------------------------------------------------------------------------


def test_encoder_identity_and_convexity():
    rng = np.random.default_rng(2)
    d, ff = 8, 16
    zero = {k: np.zeros_like(v) for k, v in encoder_params(d, ff, rng).items()}
    zero.update(ln1_g=np.ones(d), ln2_g=np.ones(d))
    X = rng.normal(size=(2, 5, d))
    np.testing.assert_array_equal(neural.encoder_layer(X, tensors(zero), heads=2).data, X)

    row = rng.normal(size=d)
    conv = dict(zero, Wv=np.zeros((d, d)), bv=row, Wo=np.eye(d), Wq=rng.normal(size=(d, d)), Wk=rng.normal(size=(d, d)))
    out = neural.encoder_layer(X, tensors(conv), heads=2).data
    np.testing.assert_allclose(out - X, np.broadcast_to(row, X.shape), atol=1e-12)


def test_encoder_gradient_4x128():
    rng = np.random.default_rng(3)
    arrays = encoder_params(128, 256, rng)
    X = rng.normal(size=(1, 4, 128))
    R = rng.normal(size=(1, 4, 128))
    arrays["X"] = X
    loss = lambda p: nc.sum(neural.encoder_layer(p["X"], {k: v for k, v in p.items() if k != "X"}, heads=8) * Tensor(R))
    assert check_gradients(loss, arrays, rng, per_param=4) < TOL


def test_attention_rows_are_convex_combinations():
    rng = np.random.default_rng(4)
    q, k = Tensor(rng.normal(size=(2, 5, 4))), Tensor(rng.normal(size=(2, 5, 4)))
    v = Tensor(np.broadcast_to(rng.normal(size=4), (2, 5, 4)).copy())
    np.testing.assert_allclose(neural.attention(q, k, v).data, v.data, atol=1e-14)


def test_positional_encoding_values():
    pe = neural.positional_encoding(3, 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(pe[2], [np.sin(2), np.cos(2), np.sin(2 / 100), np.cos(2 / 100)], atol=1e-15)


# -- full models -------------------------------------------------------------------

SMALL = {
    "gru": RnnConfig(cell="gru", hidden=8),
    "lstm": RnnConfig(cell="lstm", hidden=8),
    "transformer": TransformerConfig(d_model=16, heads=4, layers=2, ff_dim=32, dropout=0.0),
}


@pytest.mark.parametrize("arch", ["gru", "lstm", "transformer"])
def test_full_model_gradient(arch):
    rng = np.random.default_rng(5)
    model = neural.make_model(arch, 4, 3, SMALL[arch], seed=1)
    for k in model.params:
        if k.endswith("_b") or k.split("/")[-1].startswith("b"):
            model.params[k] = Tensor(0.1 * rng.normal(size=model.params[k].shape), requires_grad=True)
    seq, static, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 3)), rng.normal(size=6)
    arrays = {k: v.data for k, v in model.params.items()}

    def loss(p):
        model.params = p
        return neural._mse(model.forward(seq, static), y)

    assert check_gradients(loss, arrays, rng, per_param=4) < TOL


@pytest.mark.parametrize("arch", ["gru", "lstm", "transformer"])
def test_forward_contracts(arch):
    rng = np.random.default_rng(6)
    model = neural.make_model(arch, 5, 2, SMALL[arch], seed=0)
    seq, static = rng.normal(size=(10, 5)), rng.normal(size=(10, 2))
    out = model.predict(seq, static)
    assert out.shape == (10,)
    perm = rng.permutation(10)
    np.testing.assert_allclose(model.predict(seq[perm], static[perm]), out[perm], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(model.predict(seq, static), out)
    model.params["head_W"] = Tensor(np.zeros_like(model.params["head_W"].data), requires_grad=True)
    np.testing.assert_array_equal(model.predict(seq, static), np.zeros(10))
    with pytest.raises(ValueError):
        model.predict(seq[:, :4], static)


def test_single_lag_transformer_shape():
    model = neural.make_model("transformer", 1, 2, SMALL["transformer"])
    assert model.predict(np.ones((3, 1)), np.zeros((3, 2))).shape == (3,)


def test_sample_ordering_oldest_first():
    X = np.array([[1.0, 2.0, 3.0, 9.0]])  # lags 1, 2, 3 then one static column
    seq, static = neural.rows_to_samples(X, 3)
    np.testing.assert_array_equal(seq, [[3.0, 2.0, 1.0]])
    np.testing.assert_array_equal(static, [[9.0]])


def test_default_hyperparameters():
    r, t = RnnConfig(), TransformerConfig()
    assert (r.hidden, r.learning_rate, r.batch_size, r.max_epochs, r.patience) == (64, 1e-3, 2048, 200, 20)
    assert (t.d_model, t.heads, t.layers, t.ff_dim, t.dropout) == (128, 8, 4, 256, 0.1)
    with pytest.raises(ValueError):
        TransformerConfig(d_model=30, heads=8)


# -- training ---------------------------------------------------------------------


def memorize_set(rng, n=32, L=4, S=3):
    return SequenceSamples(rng.normal(size=(n, L)), rng.normal(size=(n, S)), rng.normal(size=n))


def station_samples(rng, n=32, L=6):
    """Each sample from its own station: calendar columns plus a one-hot identity."""
    static = np.c_[rng.normal(size=(n, 3)), np.eye(n)]
    return SequenceSamples(rng.normal(size=(n, L)), static, rng.normal(size=n))


# dropout is a train-time regularizer; the capacity check runs the transformer without it
MEMORIZE = {"gru": None, "lstm": None, "transformer": TransformerConfig(dropout=0.0)}


@pytest.mark.parametrize("arch", ["gru", "lstm", "transformer"])
def test_memorize_32_samples(arch):
    data = station_samples(np.random.default_rng(7))
    model = neural.make_model(arch, 6, data.static.shape[1], MEMORIZE[arch], seed=0)
    result = neural.train(model, data, data, seed=0)
    final = float(np.mean((model.predict(data.seq, data.static) - data.target) ** 2))
    assert final < 1e-3
    assert result.stopped_epoch <= 200


class DriftModel(SequenceRegressor):
    """One bias parameter; training pulls it toward the train targets, away from validation."""

    arch = "drift"

    def _init(self, rng):
        return {"b": np.zeros(1)}

    def forward(self, seq, static, train=False, rng=None):
        return nc.reshape(Tensor(np.zeros((len(seq), 1))) + self.params["b"], (len(seq),))


def test_patience_stops_at_epoch_21():
    cfg = RnnConfig(patience=20, max_epochs=200)
    model = DriftModel(2, 1, cfg)
    tr = SequenceSamples(np.zeros((4, 2)), np.zeros((4, 1)), np.ones(4))
    va = SequenceSamples(np.zeros((4, 2)), np.zeros((4, 1)), -np.ones(4))
    result = neural.train(model, tr, va)
    vals = [v for _, _, v in result.history]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert (result.stopped_epoch, result.best_epoch) == (21, 1)
    assert model.params["b"].data[0] == pytest.approx(1e-3, rel=1e-6)


def test_best_epoch_parameters_are_returned():
    rng = np.random.default_rng(8)
    data = memorize_set(rng, n=64)
    val = memorize_set(rng, n=16)
    model = neural.make_model("gru", 4, 3, RnnConfig(hidden=8, max_epochs=30, patience=5, batch_size=16), seed=2)
    result = neural.train(model, data, val, seed=2)
    best_val = min(v for _, _, v in result.history)
    got = float(np.mean((model.predict(val.seq, val.static) - val.target) ** 2))
    assert got == best_val
    assert result.history[result.best_epoch - 1][2] == best_val


def test_determinism_and_checkpoint(tmp_path):
    rng = np.random.default_rng(9)
    data = memorize_set(rng, n=48)
    cfg = TransformerConfig(d_model=16, heads=4, layers=1, ff_dim=32, dropout=0.1, max_epochs=5, batch_size=16)
    ckpts = []
    for i in range(2):
        model = neural.make_model("transformer", 4, 3, cfg, seed=3)
        neural.train(model, data, data, seed=3)
        model.save(tmp_path / f"m{i}.txt")
        ckpts.append((tmp_path / f"m{i}.txt").read_text())
    assert ckpts[0] == ckpts[1]
    loaded = neural.load_model(tmp_path / "m0.txt")
    np.testing.assert_array_equal(loaded.predict(data.seq, data.static), model.predict(data.seq, data.static))


def test_history_csv(tmp_path):
    res = neural.TrainResult(2, 3, [(1, 0.5, 0.25), (2, 0.1, 0.2)])
    res.write_history(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == ["epoch,train_loss,val_loss", "1,0.5,0.25", "2,0.1,0.2"]


def test_divergence_is_reported():
    model = DriftModel(2, 1, RnnConfig())
    bad = SequenceSamples(np.zeros((2, 2)), np.zeros((2, 1)), np.array([np.inf, 1.0]))
    with pytest.raises(neural.TrainingDiverged):
        neural.train(model, bad, bad)
