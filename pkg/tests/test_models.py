from fractions import Fraction

import numpy as np
import pytest

from geoact.activities import N_CLASSES
from geoact.errors import DimensionError, InvalidHyperparameterError, TrainingDivergedError
from geoact.models import (
    MODEL_CLASSES,
    ModelSpec,
    fit,
    gbt_fit,
    knn_fit,
    load_model,
    mlp_fit,
    rmlp_fit,
)
from geoact.models.gbt import leaf_weight
from geoact.models.mlp import COMMON_DEFAULTS, RMLP_DEFAULTS, Network

FAST = {
    "knn": {"k": 3},
    "gbt": {"num_round": 5, "max_depth": 3},
    "mlp": {"max_epochs": 5, "hidden_layers": 1, "units": 16},
    "rmlp": {"max_epochs": 5, "hidden_layers": 2, "units": 16},
}


def blobs(n=300, d=4, k=3, seed=0, sep=4.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, sep, size=(k, d))
    y = rng.integers(k, size=n)
    return centers[y] + rng.normal(size=(n, d)), y


@pytest.fixture(scope="module")
def data():
    return blobs()


class TestCommonContract:
    @pytest.mark.parametrize("family", sorted(FAST))
    def test_simplex_output(self, family, data):
        X, y = data
        m = fit(ModelSpec(family, FAST[family], seed=1), X, y)
        Xq = np.random.default_rng(5).normal(0, 5, size=(50, X.shape[1]))
        P = m.predict_proba(Xq)
        assert P.shape == (50, N_CLASSES)
        assert (P >= 0).all()
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert np.array_equal(m.predict(Xq), P.argmax(axis=1))

    @pytest.mark.parametrize("family", sorted(FAST))
    def test_deterministic(self, family, data):
        X, y = data
        a = fit(ModelSpec(family, FAST[family], seed=3), X, y).predict_proba(X)
        b = fit(ModelSpec(family, FAST[family], seed=3), X, y).predict_proba(X)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("family", sorted(FAST))
    def test_save_load_roundtrip(self, family, data, tmp_path):
        X, y = data
        m = fit(ModelSpec(family, FAST[family], seed=2), X, y, fingerprint="f00d")
        m.context = {"city": "X"}
        p = tmp_path / f"{family}.model"
        m.save(p)
        back = load_model(p, expected_fingerprint="f00d")
        assert type(back) is MODEL_CLASSES[family]
        assert back.spec == m.spec
        assert back.context == {"city": "X"}
        assert np.array_equal(back.predict_proba(X), m.predict_proba(X))

    def test_fingerprint_mismatch_refused(self, data, tmp_path):
        X, y = data
        p = tmp_path / "m.model"
        fit(ModelSpec("gbt", FAST["gbt"]), X, y, fingerprint="aaaa").save(p)
        with pytest.raises(DimensionError):
            load_model(p, expected_fingerprint="bbbb")

    @pytest.mark.parametrize("family", sorted(FAST))
    def test_dimension_mismatch(self, family, data):
        X, y = data
        m = fit(ModelSpec(family, FAST[family]), X, y)
        with pytest.raises(DimensionError):
            m.predict_proba(X[:, :-1])

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            ModelSpec("svm")

    @pytest.mark.parametrize("family", sorted(FAST))
    def test_unknown_hyperparameter(self, family, data):
        X, y = data
        with pytest.raises(InvalidHyperparameterError):
            fit(ModelSpec(family, {"bogus": 1}), X, y)


class TestKNN:
    # hand-built set: five points on a line with labels
    X5 = np.array([[0.0], [1.0], [2.0], [3.0], [10.0]])
    y5 = np.array([0, 0, 1, 1, 2])

    @staticmethod
    def brute(X, y, q, k, l1=False):
        d = [(np.abs(x - q).sum() if l1 else ((x - q) ** 2).sum(), i) for i, x in enumerate(X)]
        idx = [i for _, i in sorted(d)[:k]]
        return np.bincount(y[idx], minlength=N_CLASSES) / k

    def test_self_query_k1(self, data):
        X, y = data
        m = knn_fit(X, y, {"k": 1})
        assert np.array_equal(m.predict(X), y)
        assert np.all(m.predict_proba(X).max(axis=1) == 1.0)

    @pytest.mark.parametrize("q", [-1.0, 0.4, 1.6, 2.5, 7.0])
    def test_k3_hand_set(self, q):
        m = knn_fit(self.X5, self.y5, {"k": 3, "standardize": False})
        assert np.array_equal(m.predict_proba(np.array([[q]]))[0], self.brute(self.X5, self.y5, np.array([q]), 3))

    def test_k3_explicit_counts(self):
        m = knn_fit(self.X5, self.y5, {"k": 3, "standardize": False})
        # neighbours of 2.4: 2 (d .4), 3 (d .6), 1 (d 1.4) -> labels 1, 1, 0
        assert np.allclose(m.predict_proba(np.array([[2.4]]))[0][:3], [1 / 3, 2 / 3, 0])

    def test_ties_go_to_lower_row(self):
        X = np.array([[1.0], [-1.0], [1.0]])
        m = knn_fit(X, np.array([4, 5, 6]), {"k": 1, "standardize": False})
        assert m.predict(np.array([[0.0]]))[0] == 4
        assert m.neighbors(np.array([[0.0]])).tolist() == [[0]]

    def test_k_equals_n_gives_prior(self, data):
        X, y = data
        m = knn_fit(X, y, {"k": len(X)})
        prior = np.bincount(y, minlength=N_CLASSES) / len(y)
        Xq = np.random.default_rng(0).normal(size=(7, X.shape[1]))
        assert np.allclose(m.predict_proba(Xq), prior)

    @pytest.mark.parametrize("metric", ["L1", "L2"])
    def test_matches_brute_force(self, data, metric):
        X, y = data
        m = knn_fit(X, y, {"k": 5, "metric": metric, "standardize": False})
        Xq = np.random.default_rng(9).normal(0, 4, size=(20, X.shape[1]))
        for q, p in zip(Xq, m.predict_proba(Xq)):
            assert np.array_equal(p, self.brute(X, y, q, 5, metric == "L1"))

    def test_affine_invariance_with_standardization(self, data):
        X, y = data
        rng = np.random.default_rng(4)
        scale = rng.uniform(0.1, 100, size=X.shape[1])
        shift = rng.normal(0, 50, size=X.shape[1])
        Xq = rng.normal(0, 4, size=(60, X.shape[1]))
        a = knn_fit(X, y, {"k": 5}).predict(Xq)
        b = knn_fit(X * scale + shift, y, {"k": 5}).predict(Xq * scale + shift)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("k", [0, 301])
    def test_invalid_k(self, data, k):
        X, y = data
        with pytest.raises(InvalidHyperparameterError):
            knn_fit(X, y, {"k": k})

    def test_invalid_metric(self, data):
        X, y = data
        with pytest.raises(InvalidHyperparameterError):
            knn_fit(X, y, {"metric": "cosine"})


def _hand_leaves(x, y, n_classes):
    """Exact one-split Newton leaves -G/H per class, using rational arithmetic."""
    n = len(y)
    prior = [Fraction(int((y == c).sum()), n) for c in range(n_classes)]
    out = {}
    for side, mask in (("left", x < 0.5), ("right", x >= 0.5)):
        vals = []
        for c in range(n_classes):
            G = sum(prior[c] - (1 if yi == c else 0) for yi in y[mask])
            H = sum(2 * prior[c] * (1 - prior[c]) for _ in y[mask])
            vals.append(float(-G / H))
        out[side] = vals
    return out


class TestGBT:
    def test_zero_rounds_is_prior(self, data):
        X, y = data
        m = gbt_fit(X, y, {"num_round": 0})
        prior = np.bincount(y, minlength=N_CLASSES) / len(y)
        assert np.array_equal(m.predict_proba(X[:5]), np.tile(prior, (5, 1)))
        assert np.all(m.predict(X[:5]) == np.argmax(prior))

    def test_zero_rounds_is_prior_nine_classes(self, tmp_path):
        rng = np.random.default_rng(7)
        y = rng.choice(N_CLASSES, size=997, p=rng.dirichlet(np.ones(N_CLASSES)))
        X = rng.normal(size=(997, 3))
        m = gbt_fit(X, y, {"num_round": 0})
        prior = np.bincount(y, minlength=N_CLASSES) / len(y)
        assert np.array_equal(m.predict_proba(X), np.tile(prior, (len(y), 1)))
        m.save(tmp_path / "m.model")
        assert np.array_equal(load_model(tmp_path / "m.model").predict_proba(X[:3]), np.tile(prior, (3, 1)))

    def test_one_split_newton_leaves(self):
        x = np.array([0, 0, 0, 1, 1, 1, 1], dtype=float)
        y = np.array([0, 0, 1, 1, 2, 2, 2])
        params = dict(num_round=1, max_depth=1, eta=1.0, gamma=0.0, min_child_weight=0.0)
        params["lambda"] = 0.0
        m = gbt_fit(x[:, None], y, params, n_classes=3)
        hand = _hand_leaves(x, y, 3)
        F = m.raw_score(np.array([[0.0], [1.0]])) - m.base_score
        assert np.allclose(F[0], hand["left"], rtol=0, atol=1e-9)
        assert np.allclose(F[1], hand["right"], rtol=0, atol=1e-9)

    def test_depth1_perfect_split(self):
        x = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([0, 0, 1, 1])
        params = {"num_round": 1, "max_depth": 1, "eta": 1.0, "lambda": 0.0, "min_child_weight": 0.0}
        m = gbt_fit(x, y, params, n_classes=2)
        assert (m.predict(x) == y).all()
        # uniform prior, p = 1/2: G = -1 / +1 per side, H = 1 -> leaves +1 / -1
        assert np.allclose(m.raw_score(x) - m.base_score, [[1, -1], [1, -1], [-1, 1], [-1, 1]], atol=1e-12)
        assert m.trees[0][0].threshold[0] == 1.5

    def test_monotone_training_loss(self):
        X, y = blobs(400, 5, 5, seed=2, sep=1.5)
        m = gbt_fit(X, y, {"num_round": 50, "max_depth": 3, "eta": 0.3})
        losses = np.array(m.train_loss_)
        assert len(losses) == 50
        assert np.all(np.diff(losses) <= 0)

    def test_depth_bound(self, data):
        X, y = data
        m = gbt_fit(X, y, {"num_round": 3, "max_depth": 2})
        assert all(t.depth <= 2 for r in m.trees for t in r)
        assert all(np.isfinite(t.value).all() for r in m.trees for t in r)

    def test_absent_class_gets_no_mass(self):
        X, y = blobs(100, 3, 2, seed=1)
        m = gbt_fit(X, y, {"num_round": 3})
        P = m.predict_proba(X)
        assert np.all(P[:, 2:] == 0)

    def test_leaf_weight_regularizers(self):
        assert leaf_weight(-4.0, 1.0, 1.0, 0.0, 0.0) == 2.0
        assert leaf_weight(-4.0, 1.0, 0.0, 1.0, 0.0) == 3.0  # soft threshold
        assert leaf_weight(-0.5, 1.0, 0.0, 1.0, 0.0) == 0.0
        assert leaf_weight(-4.0, 1.0, 0.0, 0.0, 0.7) == 0.7  # max_delta_step clip

    def test_gamma_blocks_splits(self, data):
        X, y = data
        m = gbt_fit(X, y, {"num_round": 2, "gamma": 1e9})
        assert all(len(t.feature) == 1 for r in m.trees for t in r)

    def test_subsample_and_colsample_seeded(self, data):
        X, y = data
        params = {"num_round": 4, "subsample": 0.5, "colsample_bytree": 0.5, "colsample_bynode": 0.5}
        a = gbt_fit(X, y, ModelSpec("gbt", params, 1)).predict_proba(X)
        b = gbt_fit(X, y, ModelSpec("gbt", params, 1)).predict_proba(X)
        c = gbt_fit(X, y, ModelSpec("gbt", params, 2)).predict_proba(X)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("bad", [{"eta": 0.0}, {"subsample": 0.0}, {"max_depth": 0}, {"lambda": -1.0}])
    def test_illegal_params(self, data, bad):
        X, y = data
        with pytest.raises(InvalidHyperparameterError):
            gbt_fit(X, y, bad)

    def test_tiny_training_set(self):
        X = np.array([[0.0], [1.0], [2.0]])
        m = gbt_fit(X, np.array([0, 1, 1]), {"num_round": 1})
        assert np.isfinite(m.predict_proba(X)).all()


def _grad_check(regularized: bool, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    cfg = {**(RMLP_DEFAULTS if regularized else COMMON_DEFAULTS),
           "hidden_layers": 2, "units": 8, "dtype": "float64"}
    if regularized:
        cfg.update(dropout_rate=0.2, stddev=0.1, skip=True)
    net = Network(5, N_CLASSES, cfg, regularized, rng)
    X = rng.normal(size=(16, 5))
    Y = np.eye(N_CLASSES)[rng.integers(N_CLASSES, size=16)]
    net.loss_and_grads(X, Y, True, rng)  # draw the noise and dropout masks once
    net.freeze()
    _, grads = net.loss_and_grads(X, Y, True, rng)
    grads = [g.copy() for g in grads]
    worst = 0.0
    eps = 1e-6
    for p, g in zip(net.params(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            lp, _ = net.loss_and_grads(X, Y, True, rng)
            p[idx] = old - eps
            lm, _ = net.loss_and_grads(X, Y, True, rng)
            p[idx] = old
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(num - g[idx]) / max(abs(num) + abs(g[idx]), 1e-8))
    return worst


class TestMLP:
    @pytest.mark.parametrize("regularized", [False, True])
    def test_gradient_check(self, regularized):
        assert _grad_check(regularized) < 1e-4

    def test_degenerate_rmlp_equals_mlp(self, data):
        X, y = data
        common = {"max_epochs": 15, "hidden_layers": 2, "units": 16, "learning_rate": 0.01}
        plain = mlp_fit(X, y, ModelSpec("mlp", common, 7))
        degenerate = rmlp_fit(
            X, y,
            ModelSpec("rmlp", {**common, "stddev": 0.0, "dropout_rate": 0.0, "weight_decay": 0.0,
                               "skip": False, "swa": False, "batch_norm": False}, 7),
        )
        assert plain.history_["train_loss"] == degenerate.history_["train_loss"]
        assert plain.history_["val_loss"] == degenerate.history_["val_loss"]
        assert np.array_equal(plain.predict_proba(X), degenerate.predict_proba(X))

    @pytest.mark.parametrize("family", ["mlp", "rmlp"])
    def test_separable_blobs(self, family):
        # two blobs 12 standard deviations apart along a random direction: separable by construction
        rng = np.random.default_rng(11)
        direction = rng.normal(size=6)
        direction /= np.linalg.norm(direction)
        y = rng.integers(2, size=400)
        X = rng.normal(size=(400, 6)) + np.where(y[:, None] == 1, 6, -6) * direction
        assert np.all((X @ direction > 0) == (y == 1))
        m = fit(ModelSpec(family, {"max_epochs": 100, "hidden_layers": 3, "units": 32}, 0), X, y)
        assert np.mean(m.predict(X) == y) >= 0.99

    def test_best_validation_loss_never_increases(self, data):
        X, y = data
        m = rmlp_fit(X, y, ModelSpec("rmlp", {"max_epochs": 40, "hidden_layers": 2, "units": 16}, 0))
        best = np.array(m.history_["best_val_loss"])
        assert np.all(np.diff(best) <= 0)
        assert best[-1] <= min(m.history_["val_loss"]) + 1e-3

    def test_early_stopping_stops(self):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(200, 3)), rng.integers(3, size=200)  # pure noise
        m = mlp_fit(X, y, ModelSpec("mlp", {"max_epochs": 500, "hidden_layers": 1, "units": 8}, 0))
        assert len(m.history_["val_loss"]) < 500
        assert len(m.history_["val_loss"]) - 1 - m.best_epoch_ >= 10

    def test_divergence_reports_epoch(self, data):
        X, y = data
        with pytest.raises(TrainingDivergedError) as info:
            mlp_fit(X, y, ModelSpec("mlp", {"learning_rate": 1e300, "max_epochs": 5, "hidden_layers": 1}, 0))
        assert info.value.epoch == 0

    @pytest.mark.parametrize("swa", [False, True])
    def test_rmlp_variants_train(self, data, swa):
        X, y = data
        m = rmlp_fit(X, y, ModelSpec("rmlp", {"max_epochs": 20, "hidden_layers": 2, "units": 16, "swa": swa}, 0))
        assert np.mean(m.predict(X) == y) > 0.85

    @pytest.mark.parametrize("bad", [{"dropout_rate": 1.0}, {"weight_decay": -1.0}, {"learning_rate": 0.0}])
    def test_illegal_params(self, data, bad):
        X, y = data
        with pytest.raises(InvalidHyperparameterError):
            rmlp_fit(X, y, ModelSpec("rmlp", bad))
