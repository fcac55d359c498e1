import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evforecast import gbt
from evforecast.gbt import Ensemble, GbtConfig

EXACT = dict(subsample=1.0, colsample_bytree=1.0)


def exact_tree_predict(X, y_resid, depth, lam, mcw):
    """Exact greedy tree on raw thresholds; returns a predictor closure."""

    def build(rows, d):
        g = -y_resid[rows]
        leaf = -g.sum() / (len(rows) + lam)
        if d >= depth or len(rows) < 2:
            return ("leaf", leaf)
        best = None
        G, H = g.sum(), float(len(rows))
        for f in range(X.shape[1]):
            vals = np.unique(X[rows, f])
            for a, b in zip(vals[:-1], vals[1:]):
                thr = (a + b) / 2
                left = X[rows, f] < thr
                GL, HL = g[left].sum(), float(left.sum())
                GR, HR = G - GL, H - HL
                if HL < mcw or HR < mcw:
                    continue
                gain = 0.5 * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam))
                if gain > 0 and (best is None or gain > best[0] + 1e-12):
                    best = (gain, f, thr)
        if best is None:
            return ("leaf", leaf)
        _, f, thr = best
        left = X[rows, f] < thr
        return ("split", f, thr, build(rows[left], d + 1), build(rows[~left], d + 1))

    root = build(np.arange(len(X)), 0)

    def predict(Z):
        out = np.empty(len(Z))
        for i, z in enumerate(Z):
            node = root
            while node[0] == "split":
                node = node[3] if z[node[1]] < node[2] else node[4]
            out[i] = node[1]
        return out

    return predict


def naive_predict(ens, X):
    out = []
    for x in X:
        total = ens.base_score
        for t in ens.trees[: ens.best_round]:
            i = 0
            while t.feature[i] >= 0:
                i = t.left[i] if x[t.feature[i]] < t.threshold[i] else t.right[i]
            total += ens.learning_rate * t.value[i]
        out.append(total)
    return np.array(out)


def test_histogram_examples():
    edges = np.array([2.5])
    b = np.searchsorted(edges, [1, 2, 3, 4], side="right")
    G, H, C = gbt.build_histogram(b, np.ones(4), np.ones(4), 2)
    assert list(G) == [2, 2] and list(C) == [2, 2]
    e = gbt.bin_edges(np.full(10, 3.0))
    assert len(e) == 0
    _, _, C = gbt.build_histogram(np.searchsorted(e, np.full(10, 3.0), side="right"), np.ones(10), np.ones(10), 1)
    assert list(C) == [10]
    # bins beyond the last fold into it
    G, _, C = gbt.build_histogram([0, 5, 7], np.array([1.0, 2.0, 3.0]), np.ones(3), 3)
    assert list(G) == [1, 0, 5] and list(C) == [1, 0, 2]


def test_histogram_matches_naive_accumulation():
    rng = np.random.default_rng(0)
    x = rng.normal(size=1000)
    g, h = rng.normal(size=1000), rng.uniform(0.5, 2, size=1000)
    edges = gbt.bin_edges(x, 64)
    b = np.searchsorted(edges, x, side="right")
    G, H, C = gbt.build_histogram(b, g, h, len(edges) + 1)
    G0, H0, C0 = np.zeros(len(edges) + 1), np.zeros(len(edges) + 1), np.zeros(len(edges) + 1)
    for i in range(1000):
        G0[b[i]] += g[i]
        H0[b[i]] += h[i]
        C0[b[i]] += 1
    np.testing.assert_array_equal(C, C0)
    np.testing.assert_allclose(G, G0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(H, H0, rtol=0, atol=1e-12)
    # the kernel used during growth agrees too
    binned = b.astype(np.uint16)[:, None]
    hist = gbt._node_histograms(binned, np.arange(1000), np.array([0]), g, h, len(edges) + 1)
    np.testing.assert_array_equal(hist[0, :, 0], G0)
    np.testing.assert_array_equal(hist[0, :, 2], C0)


def split_oracle(x, g, lam):
    best = None
    vals = np.unique(x)
    for k, (a, b) in enumerate(zip(vals[:-1], vals[1:])):
        left = x < (a + b) / 2
        GL, HL, GR, HR = g[left].sum(), left.sum(), g[~left].sum(), (~left).sum()
        gain = float(gbt.split_gain(GL, HL, GR, HR, lam, 0.0))
        if gain > 0 and (best is None or gain > best[1]):
            best = (k, gain)
    return best


def test_best_split_examples():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    g = 0.5 - y
    edges = gbt.bin_edges(x)
    b = np.searchsorted(edges, x, side="right")
    s = gbt.best_split([gbt.build_histogram(b, g, np.ones(4), len(edges) + 1)], lam=0.0)
    assert s.feature == 0 and edges[s.bin] == 2.5
    assert (s.bin, s.gain) == pytest.approx(split_oracle(x, g, 0.0))
    assert gbt.best_split([gbt.build_histogram(b, np.zeros(4), np.ones(4), 4)], lam=1.0) is None
    two = gbt.best_split([gbt.build_histogram([0, 1], np.array([0.5, -0.5]), np.ones(2), 2)], lam=0.0)
    assert two is not None and two.bin == 0 and two.gain > 0


def test_best_split_tie_breaking():
    hist = [gbt.build_histogram([0, 1], np.array([1.0, -1.0]), np.ones(2), 2)] * 2
    s = gbt.best_split(hist, lam=0.0)
    assert (s.feature, s.bin) == (0, 0)
    sym = gbt.best_split([gbt.build_histogram([0, 1, 2], np.array([1.0, 0.0, -1.0]), np.ones(3), 3)],
                         lam=0.0, min_child_weight=0.5)
    assert sym.bin == 0


def test_stump_closed_form():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    cfg = GbtConfig(max_depth=1, max_rounds=1, lambda_l2=0.0, early_stop_patience=5, **EXACT)
    ens = gbt.boost(X, y, X, y, cfg)
    assert ens.best_round == 1
    np.testing.assert_allclose(ens.predict(X), [0.475, 0.475, 0.525, 0.525], rtol=0, atol=1e-15)
    assert len(set(ens.predict(X))) == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_histogram_path_equals_exact_path(seed, depth):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 12, size=(60, 3)).astype(float)
    y = X[:, 0] * 0.3 - X[:, 2] + rng.normal(size=60)
    cfg = GbtConfig(max_depth=depth, max_rounds=1, early_stop_patience=5, **EXACT)
    ens = gbt.boost(X, y, X[:5], y[:5], cfg)
    oracle = exact_tree_predict(X, y - y.mean(), depth, 1.0, 1.0)
    np.testing.assert_allclose(ens.predict(X, n_trees=1), y.mean() + 0.05 * oracle(X), rtol=0, atol=1e-12)


def test_linear_target_train_rmse_monotone():
    X = np.linspace(0, 1, 200)[:, None]
    y = 3.0 * X[:, 0]
    cfg = GbtConfig(max_depth=3, max_rounds=500, early_stop_patience=500, **EXACT)
    ens = gbt.boost(X, y, X, y, cfg)
    rmse = [np.sqrt(np.mean((ens.predict(X, n_trees=k) - y) ** 2)) for k in range(0, ens.best_round + 1, 10)]
    assert all(b <= a + 1e-12 for a, b in zip(rmse, rmse[1:]))


def test_noise_validation_stops_early():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(400, 4))
    y = rng.normal(size=400)
    cfg = GbtConfig(max_depth=3)
    ens = gbt.boost(X, y, rng.normal(size=(100, 4)), rng.normal(size=100), cfg, seed=1)
    assert ens.best_round < 2000
    assert len(ens.trees) == ens.best_round + 200


def test_predict_and_invariants():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(300, 5))
    y = np.sin(X[:, 0]) + X[:, 1] * X[:, 2]
    cfg = GbtConfig(max_depth=4, max_rounds=40, early_stop_patience=40)
    ens = gbt.boost(X[:250], y[:250], X[250:], y[250:], cfg, seed=3)
    Z = rng.normal(size=(50, 5))
    np.testing.assert_array_equal(ens.predict(Z), naive_predict(ens, Z))
    assert all(t.depth <= 4 for t in ens.trees)
    empty = Ensemble(1.25, 0.05, 5)
    np.testing.assert_array_equal(empty.predict(Z), np.full(50, 1.25))
    with pytest.raises(ValueError):
        ens.predict(Z[:, :4])
    # prefix stability: more trees never change earlier prefixes
    longer = gbt.boost(X[:250], y[:250], X[250:], y[250:], GbtConfig(max_depth=4, max_rounds=60, early_stop_patience=60), seed=3)
    for k in (1, 10, 40):
        np.testing.assert_array_equal(ens.predict(Z, n_trees=k), longer.predict(Z, n_trees=k))


def test_determinism_and_seed_independence_without_sampling():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(200, 3)), rng.normal(size=200)
    cfg = GbtConfig(max_depth=3, max_rounds=20, **EXACT)
    a = gbt.boost(X, y, X[:20], y[:20], cfg, seed=0)
    b = gbt.boost(X, y, X[:20], y[:20], cfg, seed=99)
    assert a.dumps() == b.dumps()
    sampled = GbtConfig(max_depth=3, max_rounds=20)
    assert gbt.boost(X, y, X[:20], y[:20], sampled, seed=5).dumps() == gbt.boost(X, y, X[:20], y[:20], sampled, seed=5).dumps()


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(150, 4)), rng.normal(size=150)
    ens = gbt.boost(X, y, X[:30], y[:30], GbtConfig(max_depth=3, max_rounds=15), seed=2)
    ens.save(tmp_path / "m.txt")
    back = Ensemble.load(tmp_path / "m.txt")
    assert back.dumps() == ens.dumps()
    np.testing.assert_array_equal(back.predict(X), ens.predict(X))


def test_config_validation_and_empty_validation():
    with pytest.raises(ValueError):
        GbtConfig(subsample=0.0)
    with pytest.raises(ValueError):
        GbtConfig(max_depth=0)
    with pytest.raises(ValueError):
        gbt.boost(np.ones((3, 1)), np.ones(3), np.ones((0, 1)), np.ones(0))
