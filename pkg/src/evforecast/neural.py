"""GRU, LSTM and Transformer-encoder regressors over lag sequences.

Each sample is a short sequence of normalized lag values (oldest first); the
static block (calendar + identity one-hots) is appended to every step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .earlystop import EarlyStopping
from .features import FeatureMatrix
from .numcore import Tape, Tensor


class TrainingDiverged(RuntimeError):
    """Loss or activations became non-finite during training."""


@dataclass(frozen=True)
class RnnConfig:
    cell: str = "gru"
    hidden: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 200
    patience: int = 20

    def __post_init__(self) -> None:
        if self.cell not in ("gru", "lstm"):
            raise ValueError("cell must be 'gru' or 'lstm'")


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 128
    heads: int = 8
    layers: int = 4
    ff_dim: int = 256
    dropout: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 200
    patience: int = 20

    def __post_init__(self) -> None:
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by the number of heads")


@dataclass
class SequenceSamples:
    seq: np.ndarray  # (N, L) oldest lag first
    static: np.ndarray  # (N, S)
    target: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.target)

    def take(self, idx) -> "SequenceSamples":
        return SequenceSamples(self.seq[idx], self.static[idx], self.target[idx])


def samples_from_matrix(fm: FeatureMatrix) -> SequenceSamples:
    # matrix lag columns run from the shortest offset up; sequences run oldest first
    seq = fm.X[:, : fm.n_lags][:, ::-1]
    return SequenceSamples(np.ascontiguousarray(seq), fm.X[:, fm.n_lags :], fm.y)


def rows_to_samples(X: np.ndarray, n_lags: int) -> tuple[np.ndarray, np.ndarray]:
    return np.ascontiguousarray(X[:, :n_lags][:, ::-1]), X[:, n_lags:]


# -- cells and blocks ------------------------------------------------------------


def _gru_step(xw: Tensor, h: Tensor, p: dict[str, Tensor], H: int) -> Tensor:
    hu = h @ p["U"]
    z = nc.sigmoid(xw[:, :H] + hu[:, :H])
    r = nc.sigmoid(xw[:, H : 2 * H] + hu[:, H:])
    cand = nc.tanh(xw[:, 2 * H :] + (r * h) @ p["Uc"])
    return (1.0 - z) * h + z * cand


def gru_cell(x, h_prev, params: dict[str, Tensor]) -> Tensor:
    """z = s(W_z[x,h]+b_z), r = s(W_r[x,h]+b_r), c = tanh(W_c[x, r*h]+b_c),
    h' = (1-z)*h + z*c; input and recurrent weights are stored separately."""
    x, h_prev = nc.as_tensor(x), nc.as_tensor(h_prev)
    H = params["Uc"].shape[0]
    if x.shape[-1] != params["W"].shape[0] or h_prev.shape[-1] != H:
        raise ValueError("gru_cell: input or state width does not match the parameters")
    return _gru_step(x @ params["W"] + params["b"], h_prev, params, H)


def _lstm_step(xw: Tensor, h: Tensor, c: Tensor, p: dict[str, Tensor], H: int):
    a = xw + h @ p["U"]
    i = nc.sigmoid(a[:, :H])
    f = nc.sigmoid(a[:, H : 2 * H])
    g = nc.tanh(a[:, 2 * H : 3 * H])
    o = nc.sigmoid(a[:, 3 * H :])
    c_new = f * c + i * g
    return o * nc.tanh(c_new), c_new


def lstm_cell(x, state, params: dict[str, Tensor]):
    x = nc.as_tensor(x)
    h_prev, c_prev = (nc.as_tensor(s) for s in state)
    H = params["U"].shape[0]
    if x.shape[-1] != params["W"].shape[0] or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ValueError("lstm_cell: input or state width does not match the parameters")
    return _lstm_step(x @ params["W"] + params["b"], h_prev, c_prev, params, H)


def attention(q: Tensor, k: Tensor, v: Tensor, dropout: float = 0.0, train: bool = False, rng=None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    d_k = q.shape[-1]
    scores = (q @ nc.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))) * (1.0 / math.sqrt(d_k))
    weights = nc.dropout(nc.softmax(scores, axis=-1), dropout, train, rng)
    return weights @ v


def _affine_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return nc.layer_norm(x, axis=-1) * gamma + beta


def encoder_layer(X, params: dict[str, Tensor], heads: int, dropout: float = 0.0,
                  train: bool = False, rng=None) -> Tensor:
    """Pre-norm block: X + MHA(LN(X)), then + FF(LN(.)). ``X`` is (N, L, d)."""
    X = nc.as_tensor(X)
    N, L, d = X.shape
    if d % heads or params["Wq"].shape != (d, d):
        raise ValueError("encoder_layer: model width does not match the parameters")
    dk = d // heads

    def split(t):
        return nc.transpose(nc.reshape(t, (N, L, heads, dk)), (0, 2, 1, 3))

    a = _affine_norm(X, params["ln1_g"], params["ln1_b"])
    q = split(a @ params["Wq"] + params["bq"])
    k = split(a @ params["Wk"] + params["bk"])
    v = split(a @ params["Wv"] + params["bv"])
    o = attention(q, k, v, dropout, train, rng)
    o = nc.reshape(nc.transpose(o, (0, 2, 1, 3)), (N, L, d))
    X = X + (o @ params["Wo"] + params["bo"])
    b = _affine_norm(X, params["ln2_g"], params["ln2_b"])
    ff = nc.relu(b @ params["W1"] + params["b1"]) @ params["W2"] + params["b2"]
    return X + nc.dropout(ff, dropout, train, rng)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# -- models ------------------------------------------------------------------------


class SequenceRegressor:
    """Common parameter handling; subclasses define ``_init`` and ``forward``."""

    arch: str = ""

    def __init__(self, seq_len: int, static_dim: int, config, seed: int = 0):
        self.seq_len = seq_len
        self.static_dim = static_dim
        self.config = config
        self.seed = seed
        rng = nc.rng_stream(seed, f"init/{self.arch}")
        self.params: dict[str, Tensor] = {
            k: Tensor(v, requires_grad=True, name=k) for k, v in self._init(rng).items()
        }

    def _init(self, rng) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def forward(self, seq, static, train: bool = False, rng=None) -> Tensor:
        raise NotImplementedError

    def _check(self, seq, static) -> None:
        if seq.ndim != 2 or seq.shape[1] != self.seq_len or static.shape != (seq.shape[0], self.static_dim):
            raise ValueError(
                f"expected seq (N, {self.seq_len}) and static (N, {self.static_dim}), "
                f"got {seq.shape} and {static.shape}"
            )

    def predict(self, seq, static, batch_size: int = 8192) -> np.ndarray:
        seq, static = np.asarray(seq, dtype=np.float64), np.asarray(static, dtype=np.float64)
        self._check(seq, static)
        out = [self.forward(seq[i : i + batch_size], static[i : i + batch_size]).data
               for i in range(0, len(seq), batch_size)]
        return np.concatenate(out) if out else np.empty(0)

    def header(self) -> dict:
        return {"arch": self.arch, "seq_len": self.seq_len, "static_dim": self.static_dim,
                "seed": self.seed, "config": asdict(self.config)}

    def save(self, path: str | Path) -> None:
        nc.save_params(self.params, path, self.header())

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ValueError("checkpoint parameters do not match the architecture")
        self.params = {k: Tensor(arrays[k], requires_grad=True, name=k) for k in self.params}


def _dense(rng, fan_in, fan_out):
    return nc.glorot_uniform(rng, fan_in, fan_out)


class RecurrentRegressor(SequenceRegressor):
    def __init__(self, seq_len: int, static_dim: int, config: RnnConfig = RnnConfig(), seed: int = 0):
        self.arch = config.cell
        super().__init__(seq_len, static_dim, config, seed)

    def _init(self, rng):
        H, n_in = self.config.hidden, 1 + self.static_dim
        if self.config.cell == "gru":
            p = {
                "W": _dense(rng, n_in, 3 * H),
                "U": _dense(rng, H, 2 * H),
                "Uc": _dense(rng, H, H),
                "b": np.zeros(3 * H),
            }
        else:
            p = {"W": _dense(rng, n_in, 4 * H), "U": _dense(rng, H, 4 * H), "b": np.zeros(4 * H)}
        p["head_W"] = _dense(rng, H, 1)
        p["head_b"] = np.zeros(1)
        return p

    def forward(self, seq, static, train: bool = False, rng=None) -> Tensor:
        seq, static = np.asarray(seq, dtype=np.float64), np.asarray(static, dtype=np.float64)
        self._check(seq, static)
        p, H, N = self.params, self.config.hidden, len(seq)
        W = p["W"]
        # [lag, static] @ W split so the static projection is computed once per sample
        static_proj = nc.as_tensor(static) @ W[1:] + p["b"]
        w_lag = W[0:1]
        h = Tensor(np.zeros((N, H)))
        c = Tensor(np.zeros((N, H)))
        for t in range(self.seq_len):
            xw = static_proj + Tensor(seq[:, t : t + 1]) @ w_lag
            if self.config.cell == "gru":
                h = _gru_step(xw, h, p, H)
            else:
                h, c = _lstm_step(xw, h, c, p, H)
        return nc.reshape(h @ p["head_W"] + p["head_b"], (N,))


class TransformerRegressor(SequenceRegressor):
    arch = "transformer"

    def __init__(self, seq_len: int, static_dim: int, config: TransformerConfig = TransformerConfig(),
                 seed: int = 0):
        super().__init__(seq_len, static_dim, config, seed)
        self.pe = positional_encoding(seq_len, config.d_model)

    def _init(self, rng):
        cfg = self.config
        d = cfg.d_model
        p = {"embed_W": _dense(rng, 1 + self.static_dim, d), "embed_b": np.zeros(d)}
        for i in range(cfg.layers):
            pre = f"layer{i}/"
            p[pre + "ln1_g"] = np.ones(d)
            p[pre + "ln1_b"] = np.zeros(d)
            for name in ("Wq", "Wk", "Wv", "Wo"):
                p[pre + name] = _dense(rng, d, d)
                p[pre + "b" + name[1].lower()] = np.zeros(d)
            p[pre + "ln2_g"] = np.ones(d)
            p[pre + "ln2_b"] = np.zeros(d)
            p[pre + "W1"] = _dense(rng, d, cfg.ff_dim)
            p[pre + "b1"] = np.zeros(cfg.ff_dim)
            p[pre + "W2"] = _dense(rng, cfg.ff_dim, d)
            p[pre + "b2"] = np.zeros(d)
        # pre-norm stacks leave the residual stream unnormalized, so it is normed once before pooling
        p["final_ln_g"] = np.ones(d)
        p["final_ln_b"] = np.zeros(d)
        p["head_W"] = _dense(rng, d, 1)
        p["head_b"] = np.zeros(1)
        return p

    def layer_params(self, i: int) -> dict[str, Tensor]:
        pre = f"layer{i}/"
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def forward(self, seq, static, train: bool = False, rng=None) -> Tensor:
        seq, static = np.asarray(seq, dtype=np.float64), np.asarray(static, dtype=np.float64)
        self._check(seq, static)
        cfg, p, N, L = self.config, self.params, len(seq), self.seq_len
        d = cfg.d_model
        E = p["embed_W"]
        static_emb = nc.reshape(nc.as_tensor(static) @ E[1:] + p["embed_b"], (N, 1, d))
        lag_emb = nc.as_tensor(seq[:, :, None]) @ E[0:1]
        X = lag_emb + static_emb + Tensor(self.pe)
        for i in range(cfg.layers):
            X = encoder_layer(X, self.layer_params(i), cfg.heads, cfg.dropout, train, rng)
        pooled = nc.mean(_affine_norm(X, p["final_ln_g"], p["final_ln_b"]), axis=1)
        return nc.reshape(pooled @ p["head_W"] + p["head_b"], (N,))


ARCHITECTURES = {"gru", "lstm", "transformer"}


def make_model(arch: str, seq_len: int, static_dim: int, config=None, seed: int = 0) -> SequenceRegressor:
    if arch in ("gru", "lstm"):
        cfg = config or RnnConfig(cell=arch)
        if cfg.cell != arch:
            cfg = RnnConfig(**{**asdict(cfg), "cell": arch})
        return RecurrentRegressor(seq_len, static_dim, cfg, seed)
    if arch == "transformer":
        return TransformerRegressor(seq_len, static_dim, config or TransformerConfig(), seed)
    raise ValueError(f"unknown architecture {arch!r}")


def load_model(path: str | Path) -> SequenceRegressor:
    header, arrays = nc.load_params(path)
    arch = header["arch"]
    cfg = TransformerConfig(**header["config"]) if arch == "transformer" else RnnConfig(**header["config"])
    model = make_model(arch, header["seq_len"], header["static_dim"], cfg, header["seed"])
    model.load_state(arrays)
    return model


# -- training ----------------------------------------------------------------------


@dataclass
class TrainResult:
    best_epoch: int
    stopped_epoch: int
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train, val)

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, tr, va in self.history:
                w.writerow([e, repr(tr), repr(va)])


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(target)
    return nc.mean(diff * diff)


def train(model: SequenceRegressor, train_set: SequenceSamples, val_set: SequenceSamples,
          seed: int = 0) -> TrainResult:
    """Mini-batch Adam on MSE with early stopping on validation loss.

    The model is left holding the parameters of its best validation epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    cfg = model.config
    shuffle_rng = nc.rng_stream(seed, f"shuffle/{model.arch}")
    dropout_rng = nc.rng_stream(seed, f"dropout/{model.arch}")
    names = sorted(model.params)
    state = nc.AdamState(lr=cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience)
    result = TrainResult(best_epoch=0, stopped_epoch=0)
    best_params = dict(model.params)
    n = len(train_set)
    bs = min(cfg.batch_size, n)
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            batch = train_set.take(order[start : start + bs])
            params = [model.params[k] for k in names]
            try:
                with Tape() as tape:
                    loss = _mse(model.forward(batch.seq, batch.static, train=True, rng=dropout_rng),
                                batch.target)
                grads = nc.backward(tape, loss, params)
            except nc.NonFiniteError as exc:
                raise TrainingDiverged(f"{model.arch}: non-finite values in epoch {epoch}") from exc
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"{model.arch}: non-finite gradient in epoch {epoch}")
            new, state = nc.adam_step(params, grads, state)
            model.params = dict(zip(names, new))
            total += float(loss.data) * len(batch)
        val_loss = float(np.mean((model.predict(val_set.seq, val_set.static) - val_set.target) ** 2))
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"{model.arch}: validation loss is not finite in epoch {epoch}")
        result.history.append((epoch, total / n, val_loss))
        result.stopped_epoch = epoch
        improved = val_loss < stopper.best
        stop = stopper.update(val_loss)
        if improved:
            best_params = dict(model.params)
            result.best_epoch = epoch
        if stop:
            break
    model.params = best_params
    return result
