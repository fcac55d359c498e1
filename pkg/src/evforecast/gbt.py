"""Histogram gradient-boosted regression trees (squared error)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .earlystop import EarlyStopping
from .numcore import rng_stream


@dataclass(frozen=True)
class GbtConfig:
    learning_rate: float = 0.05
    max_depth: int = 8
    subsample: float = 0.8
    colsample_bytree: float = 0.8
    lambda_l2: float = 1.0
    max_rounds: int = 2000
    early_stop_patience: int = 200
    histogram_bins: int = 256
    min_child_weight: float = 1.0
    gamma: float = 0.0

    def __post_init__(self) -> None:
        if not (0 < self.subsample <= 1 and 0 < self.colsample_bytree <= 1):
            raise ValueError("subsample and colsample_bytree must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if not 2 <= self.histogram_bins <= 65535:
            raise ValueError("histogram_bins must lie in [2, 65535]")


def bin_edges(values, max_bins: int = 256) -> np.ndarray:
    """Interior bin edges from training values; a value ``x`` lands in bin
    ``searchsorted(edges, x, side='right')``."""
    distinct = np.unique(np.asarray(values, dtype=np.float64))
    if len(distinct) <= max_bins:
        return (distinct[:-1] + distinct[1:]) / 2.0
    qs = np.quantile(values, np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
    return np.unique(qs)


class BinMapper:
    def __init__(self, max_bins: int = 256):
        self.max_bins = max_bins
        self.edges: list[np.ndarray] = []

    def fit(self, X: np.ndarray) -> "BinMapper":
        self.edges = [bin_edges(X[:, j], self.max_bins) for j in range(X.shape[1])]
        return self

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([len(e) + 1 for e in self.edges])

    def transform(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape, dtype=np.uint16)
        for j, e in enumerate(self.edges):
            out[:, j] = np.searchsorted(e, X[:, j], side="right")
        return out


def build_histogram(binned_col, g, h, n_bins: int):
    """Per-bin gradient sum, hessian sum and row count; bins past the end fold into the last."""
    b = np.minimum(np.asarray(binned_col, dtype=np.int64), n_bins - 1)
    G = np.bincount(b, weights=g, minlength=n_bins)
    H = np.bincount(b, weights=h, minlength=n_bins)
    C = np.bincount(b, minlength=n_bins)
    return G, H, C


def split_gain(GL, HL, GR, HR, lam: float, gamma: float):
    G, H = GL + GR, HL + HR
    return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam)) - gamma


@dataclass(frozen=True)
class Split:
    feature: int
    bin: int
    gain: float


def best_split(histograms, lam: float = 1.0, gamma: float = 0.0, min_child_weight: float = 1.0) -> Split | None:
    """Best (feature, bin) over per-feature ``(G, H, count)`` histograms.

    Left child takes bins ``<= bin``. Ties go to the lowest feature index,
    then the lowest bin. Returns None when no split has positive gain.
    """
    if isinstance(histograms, np.ndarray):
        hist = histograms
    else:
        nb = max(len(G) for G, _, _ in histograms)
        hist = np.zeros((len(histograms), nb, 3))
        for k, (G, H, C) in enumerate(histograms):
            hist[k, : len(G), 0] = G
            hist[k, : len(G), 1] = H
            hist[k, : len(G), 2] = C
    f, b, gain = _scan_splits(hist, float(lam), float(gamma), float(min_child_weight))
    if f < 0:
        return None
    return Split(int(f), int(b), float(gain))


@njit(cache=True)
def _scan_splits(hist, lam, gamma, mcw):
    best_f, best_b, best_gain = -1, -1, 0.0
    for f in range(hist.shape[0]):
        Gt = 0.0
        Ht = 0.0
        Ct = 0.0
        for b in range(hist.shape[1]):
            Gt += hist[f, b, 0]
            Ht += hist[f, b, 1]
            Ct += hist[f, b, 2]
        parent = Gt * Gt / (Ht + lam)
        GL = 0.0
        HL = 0.0
        CL = 0.0
        for b in range(hist.shape[1] - 1):
            GL += hist[f, b, 0]
            HL += hist[f, b, 1]
            CL += hist[f, b, 2]
            GR = Gt - GL
            HR = Ht - HL
            CR = Ct - CL
            if CL <= 0 or CR <= 0 or HL < mcw or HR < mcw:
                continue
            gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent) - gamma
            if gain > best_gain:
                best_f, best_b, best_gain = f, b, gain
    return best_f, best_b, best_gain


@dataclass
class Tree:
    """Nodes in preorder; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    bin: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[idx]
            internal = f >= 0
            if not internal.any():
                return self.value[idx]
            go_left = X[rows, np.where(internal, f, 0)] < self.threshold[idx]
            idx = np.where(internal, np.where(go_left, self.left[idx], self.right[idx]), idx)


@njit(cache=True)
def _node_histograms(binned, rows, feats, g, h, n_bins):
    """(F, n_bins, 3) array of gradient sum, hessian sum and count, accumulated in row order."""
    out = np.zeros((feats.shape[0], n_bins, 3))
    for i in range(rows.shape[0]):
        r = rows[i]
        gi = g[r]
        hi = h[r]
        for k in range(feats.shape[0]):
            b = binned[r, feats[k]]
            out[k, b, 0] += gi
            out[k, b, 1] += hi
            out[k, b, 2] += 1.0
    return out


def _grow_tree(binned, X_edges, g, h, rows, feats, cfg: GbtConfig, n_bins_max: int) -> Tree:
    nodes: list[list] = []  # [feature, threshold, bin, left, right, value]
    feats = np.asarray(feats, dtype=np.int64)

    def grow(r, depth, hist):
        i = len(nodes)
        Gt, Ht = g[r].sum(), h[r].sum()
        nodes.append([-1, 0.0, -1, -1, -1, -Gt / (Ht + cfg.lambda_l2)])
        if depth >= cfg.max_depth or len(r) < 2:
            return i
        if hist is None:
            hist = _node_histograms(binned, r, feats, g, h, n_bins_max)
        split = best_split(hist, cfg.lambda_l2, cfg.gamma, cfg.min_child_weight)
        if split is None:
            return i
        f = feats[split.feature]
        go_left = binned[r, f] <= split.bin
        r_left, r_right = r[go_left], r[~go_left]
        h_left = h_right = None
        if depth + 1 < cfg.max_depth:
            # build the smaller child directly, derive the larger by subtraction
            if len(r_left) <= len(r_right):
                h_left = _node_histograms(binned, r_left, feats, g, h, n_bins_max)
                h_right = hist - h_left
            else:
                h_right = _node_histograms(binned, r_right, feats, g, h, n_bins_max)
                h_left = hist - h_right
        nodes[i][0] = int(f)
        nodes[i][1] = float(X_edges[f][split.bin])
        nodes[i][2] = split.bin
        nodes[i][3] = grow(r_left, depth + 1, h_left)
        nodes[i][4] = grow(r_right, depth + 1, h_right)
        return i

    grow(np.asarray(rows, dtype=np.int64), 0, None)
    cols = list(zip(*nodes))
    return Tree(
        np.array(cols[0], dtype=np.int64),
        np.array(cols[1], dtype=np.float64),
        np.array(cols[2], dtype=np.int64),
        np.array(cols[3], dtype=np.int64),
        np.array(cols[4], dtype=np.int64),
        np.array(cols[5], dtype=np.float64),
    )


@dataclass
class Ensemble:
    base_score: float
    learning_rate: float
    n_features: int
    trees: list[Tree] = field(default_factory=list)
    best_round: int = 0  # trees[:best_round] are used for prediction
    history: list[float] = field(default_factory=list)  # validation RMSE after each round, round 0 = base only

    def predict(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} feature columns, got shape {X.shape}")
        k = self.best_round if n_trees is None else n_trees
        out = np.full(len(X), self.base_score)
        for tree in self.trees[:k]:
            out = out + self.learning_rate * tree.predict(X)
        return out

    def dumps(self) -> str:
        """Text form: a JSON header line, then per tree a ``tree <i> <n_nodes>``
        line followed by preorder node lines
        ``feature threshold bin left right value``."""
        head = {
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "best_round": self.best_round,
            "history": self.history,
        }
        lines = [json.dumps(head)]
        for i, t in enumerate(self.trees):
            lines.append(f"tree {i} {len(t.feature)}")
            for row in zip(t.feature, t.threshold, t.bin, t.left, t.right, t.value):
                lines.append(
                    f"{row[0]} {float(row[1])!r} {row[2]} {row[3]} {row[4]} {float(row[5])!r}"
                )
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Ensemble":
        lines = text.splitlines()
        head = json.loads(lines[0])
        ens = cls(head["base_score"], head["learning_rate"], head["n_features"],
                  best_round=head["best_round"], history=head["history"])
        i = 1
        while i < len(lines):
            _, _, n = lines[i].split()
            rows = [ln.split() for ln in lines[i + 1 : i + 1 + int(n)]]
            cols = list(zip(*rows))
            ens.trees.append(
                Tree(
                    np.array(cols[0], dtype=np.int64),
                    np.array([float(v) for v in cols[1]]),
                    np.array(cols[2], dtype=np.int64),
                    np.array(cols[3], dtype=np.int64),
                    np.array(cols[4], dtype=np.int64),
                    np.array([float(v) for v in cols[5]]),
                )
            )
            i += 1 + int(n)
        return ens

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Ensemble":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def boost(X, y, X_val, y_val, config: GbtConfig = GbtConfig(), seed: int = 0) -> Ensemble:
    """Squared-error boosting with per-round row subsampling, per-tree column
    sampling, and early stopping on validation RMSE."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if len(y_val) == 0:
        raise ValueError("early stopping needs a non-empty validation slice")
    n, F = X.shape
    mapper = BinMapper(config.histogram_bins).fit(X)
    binned = mapper.transform(X)
    n_bins_max = int(mapper.n_bins.max())
    row_rng = rng_stream(seed, "gbt/rows")
    col_rng = rng_stream(seed, "gbt/columns")

    ens = Ensemble(float(y.mean()), config.learning_rate, F)
    pred = np.full(n, ens.base_score)
    pred_val = np.full(len(y_val), ens.base_score)
    stopper = EarlyStopping(config.early_stop_patience)
    ens.history.append(_rmse(pred_val, y_val))
    stopper.update(ens.history[-1])
    h = np.ones(n)
    n_cols = max(1, int(config.colsample_bytree * F))
    for _ in range(config.max_rounds):
        g = pred - y
        if config.subsample < 1.0:
            rows = np.flatnonzero(row_rng.random(n) < config.subsample)
        else:
            rows = np.arange(n)
        if config.colsample_bytree < 1.0:
            feats = np.sort(col_rng.choice(F, size=n_cols, replace=False))
        else:
            feats = np.arange(F)
        tree = _grow_tree(binned, mapper.edges, g, h, rows, feats, config, n_bins_max)
        ens.trees.append(tree)
        pred = pred + config.learning_rate * tree.predict(X)
        pred_val = pred_val + config.learning_rate * tree.predict(X_val)
        ens.history.append(_rmse(pred_val, y_val))
        if stopper.update(ens.history[-1]):
            break
    ens.best_round = stopper.best_index
    return ens
