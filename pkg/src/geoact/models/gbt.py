"""Second-order gradient-boosted trees with a softmax objective.

One regression tree per class per round, grown level-wise with exact greedy
split search. For class k with probabilities p the per-row gradient is
``p_k - y_k`` and the hessian ``2 p_k (1 - p_k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from geoact.activities import N_CLASSES
from geoact.errors import InvalidHyperparameterError, TrainingDivergedError
from geoact.models.base import ModelSpec, TrainedModel, check_labels, softmax

DEFAULTS = {
    "eta": 0.3,
    "lambda": 1.0,
    "alpha": 0.0,
    "gamma": 0.0,
    "num_round": 10,
    "max_depth": 6,
    "max_delta_step": 0,
    "min_child_weight": 1.0,
    "subsample": 1.0,
    "colsample_bytree": 1.0,
    "colsample_bylevel": 1.0,
    "colsample_bynode": 1.0,
}

# legal ranges; the search space samples inside these
RANGES = {
    "eta": (0.0, 1.0),
    "lambda": (0.0, math.inf),
    "alpha": (0.0, math.inf),
    "gamma": (0.0, math.inf),
    "num_round": (0, 10_000),
    "max_depth": (1, 64),
    "max_delta_step": (0, math.inf),
    "min_child_weight": (0.0, math.inf),
    "subsample": (0.0, 1.0),
    "colsample_bytree": (0.0, 1.0),
    "colsample_bylevel": (0.0, 1.0),
    "colsample_bynode": (0.0, 1.0),
}

_HESS_FLOOR = 1e-16
_MIN_GAIN = 1e-10


def resolve_params(params: dict) -> dict:
    unknown = set(params) - set(DEFAULTS)
    if unknown:
        raise InvalidHyperparameterError(f"unknown GBT hyperparameters: {sorted(unknown)}")
    p = {**DEFAULTS, **params}
    for name, (lo, hi) in RANGES.items():
        v = p[name]
        if not (lo <= v <= hi) or (isinstance(v, float) and math.isnan(v)):
            raise InvalidHyperparameterError(f"{name}={v} outside [{lo}, {hi}]")
    for name in ("subsample", "colsample_bytree", "colsample_bylevel", "colsample_bynode"):
        if p[name] <= 0:
            raise InvalidHyperparameterError(f"{name} must be > 0")
    if p["eta"] <= 0:
        raise InvalidHyperparameterError("eta must be > 0")
    p["num_round"] = int(p["num_round"])
    p["max_depth"] = int(p["max_depth"])
    return p


def _soft_threshold(G: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0:
        return G
    return np.sign(G) * np.maximum(np.abs(G) - alpha, 0.0)


def leaf_weight(G, H, lam: float, alpha: float, max_delta_step: float):
    """Regularized Newton step ``-T_alpha(G) / (H + lambda)``, optionally clipped."""
    w = -_soft_threshold(np.asarray(G, dtype=np.float64), alpha) / (np.asarray(H) + lam)
    if max_delta_step > 0:
        w = np.clip(w, -max_delta_step, max_delta_step)
    return w


def _score(G, H, lam: float, alpha: float, max_delta_step: float):
    """Twice the objective reduction achieved by a leaf's optimal weight."""
    if max_delta_step <= 0:
        T = _soft_threshold(G, alpha)
        return T * T / (H + lam)
    w = leaf_weight(G, H, lam, alpha, max_delta_step)
    return -(2 * G * w + (H + lam) * w * w + 2 * alpha * np.abs(w))


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # learning rate already applied

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=np.int64)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            idx = np.flatnonzero(inner)
            go_left = X[idx, f[idx]] < self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


class _TreeBuilder:
    """Level-wise exact greedy growth over presorted feature columns."""

    def __init__(self, X: np.ndarray, params: dict):
        self.X = X
        self.Xt = np.ascontiguousarray(X.T)
        self.order = np.argsort(self.Xt, axis=1, kind="stable")
        self.xs = np.take_along_axis(self.Xt, self.order, axis=1)
        self.p = params

    def build(self, g: np.ndarray, h: np.ndarray, rows: np.ndarray, rng: np.random.Generator) -> Tree:
        p = self.p
        lam, alpha, mds = p["lambda"], p["alpha"], p["max_delta_step"]
        n, n_feat = self.X.shape
        feats_tree = _sample_features(np.arange(n_feat), p["colsample_bytree"], rng)

        feature, threshold, left, right, value = [], [], [], [], []

        def new_node() -> int:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            return len(feature) - 1

        node_of = np.full(n, -1, dtype=np.int64)
        node_of[rows] = 0
        level_ids = [new_node()]
        G_tot = np.array([g[rows].sum()])
        H_tot = np.array([h[rows].sum()])

        for depth in range(p["max_depth"] + 1):
            L = len(level_ids)
            if L == 0:
                break
            splits: dict[int, tuple[int, float]] = {}
            if depth < p["max_depth"]:
                splits = self._find_splits(node_of, L, g, h, G_tot, H_tot, feats_tree, rng)
            score_leaf = leaf_weight(G_tot, H_tot, lam, alpha, mds)
            next_ids: list[int] = []
            next_local = np.full(L, -1, dtype=np.int64)
            for l, nid in enumerate(level_ids):
                if l not in splits:
                    value[nid] = float(score_leaf[l]) * p["eta"]
                    continue
                f, thr = splits[l]
                lc, rc = new_node(), new_node()
                feature[nid], threshold[nid], left[nid], right[nid] = f, thr, lc, rc
                next_local[l] = len(next_ids)
                next_ids += [lc, rc]
            if not next_ids:
                break
            # route rows of split nodes to their children
            active = node_of >= 0
            act_idx = np.flatnonzero(active)
            parent_local = node_of[act_idx]
            child_base = next_local[parent_local]
            keep = child_base >= 0
            act_idx, parent_local, child_base = act_idx[keep], parent_local[keep], child_base[keep]
            f_of = np.array([splits[l][0] if l in splits else 0 for l in range(L)])
            t_of = np.array([splits[l][1] if l in splits else 0.0 for l in range(L)])
            go_right = self.X[act_idx, f_of[parent_local]] >= t_of[parent_local]
            node_of[:] = -1
            node_of[act_idx] = child_base + go_right
            Lc = len(next_ids)
            G_tot = np.bincount(node_of[act_idx], weights=g[act_idx], minlength=Lc)
            H_tot = np.bincount(node_of[act_idx], weights=h[act_idx], minlength=Lc)
            level_ids = next_ids

        return Tree(
            np.asarray(feature, dtype=np.int64),
            np.asarray(threshold, dtype=np.float64),
            np.asarray(left, dtype=np.int64),
            np.asarray(right, dtype=np.int64),
            np.asarray(value, dtype=np.float64),
        )

    def _find_splits(self, node_of, L, g, h, G_tot, H_tot, feats_tree, rng):
        p = self.p
        feats = _sample_features(feats_tree, p["colsample_bylevel"], rng)
        node_mask = np.ones((L, len(feats)), dtype=np.bool_)
        if p["colsample_bynode"] < 1.0:
            node_mask[:] = False
            for l in range(L):
                node_mask[l, _sample_features(np.arange(len(feats)), p["colsample_bynode"], rng)] = True
        best_f, best_thr, best_gain = _scan_splits(
            self.xs, self.order, feats.astype(np.int64), node_of, g, h, G_tot, H_tot, node_mask,
            float(p["lambda"]), float(p["alpha"]), float(p["max_delta_step"]),
            float(p["min_child_weight"]), float(p["gamma"]),
        )
        return {
            l: (int(best_f[l]), float(best_thr[l]))
            for l in range(L)
            if best_f[l] >= 0 and best_gain[l] > _MIN_GAIN
        }


@njit(cache=True)
def _nb_score(G, H, lam, alpha, mds):
    T = G
    if alpha > 0.0:
        if G > alpha:
            T = G - alpha
        elif G < -alpha:
            T = G + alpha
        else:
            T = 0.0
    if mds <= 0.0:
        return T * T / (H + lam)
    w = -T / (H + lam)
    if w > mds:
        w = mds
    elif w < -mds:
        w = -mds
    return -(2.0 * G * w + (H + lam) * w * w + 2.0 * alpha * abs(w))


@njit(cache=True, parallel=True)
def _scan_splits(xs, order, feats, node_of, g, h, G_tot, H_tot, node_mask, lam, alpha, mds, mcw, gamma):
    """Exact greedy scan: one pass per presorted column with running per-node sums.

    ``xs`` holds each column's values in sorted order. Columns are scanned in
    parallel; the per-column winners are then merged serially in column order,
    so ties keep the lower feature index, then the lower value.
    """
    L = G_tot.shape[0]
    n = order.shape[1]
    nf = feats.shape[0]
    plain = alpha == 0.0 and mds <= 0.0
    parent = np.empty(L)
    for l in range(L):
        parent[l] = _nb_score(G_tot[l], H_tot[l], lam, alpha, mds)
    col_best = np.full((nf, L), -np.inf)
    col_thr = np.zeros((nf, L))
    for fi in prange(nf):
        f = feats[fi]
        GL = np.zeros(L)
        HL = np.zeros(L)
        last = np.zeros(L)
        seen = np.zeros(L, dtype=np.bool_)
        best = col_best[fi]
        thr_out = col_thr[fi]
        xcol = xs[f]
        ordf = order[f]
        for k in range(n):
            i = ordf[k]
            l = node_of[i]
            if l < 0:
                continue
            x = xcol[k]
            if seen[l] and x != last[l] and node_mask[l, fi]:
                hl = HL[l]
                hr = H_tot[l] - hl
                if hl >= mcw and hr >= mcw:
                    gl = GL[l]
                    gr = G_tot[l] - gl
                    if plain:
                        total = gl * gl / (hl + lam) + gr * gr / (hr + lam)
                    else:
                        total = _nb_score(gl, hl, lam, alpha, mds) + _nb_score(gr, hr, lam, alpha, mds)
                    if total > best[l]:
                        best[l] = total
                        a = last[l]
                        t = a + (x - a) / 2.0
                        if not (a < t and t <= x):
                            t = x
                        thr_out[l] = t
            GL[l] += g[i]
            HL[l] += h[i]
            last[l] = x
            seen[l] = True
    best_f = np.full(L, -1, dtype=np.int64)
    best_thr = np.zeros(L)
    best_gain = np.full(L, -np.inf)
    for fi in range(nf):
        for l in range(L):
            if col_best[fi, l] == -np.inf:
                continue
            gain = 0.5 * (col_best[fi, l] - parent[l]) - gamma
            if gain > best_gain[l]:
                best_gain[l] = gain
                best_f[l] = feats[fi]
                best_thr[l] = col_thr[fi, l]
    return best_f, best_thr, best_gain


def _sample_features(pool: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction >= 1.0:
        return pool
    k = max(1, int(round(fraction * len(pool))))
    return np.sort(rng.choice(pool, size=k, replace=False))


class GBTModel(TrainedModel):
    family = "gbt"

    def __init__(self, n_features, n_classes=N_CLASSES, fingerprint=None):
        super().__init__(n_features, n_classes, fingerprint)
        self.base_score = np.zeros(n_classes)
        self.prior = np.full(n_classes, 1.0 / n_classes)  # training class frequencies
        self.trees: list[list[Tree]] = []  # [round][class]
        self.train_loss_: list[float] = []

    def raw_score(self, X: np.ndarray) -> np.ndarray:
        F = np.tile(self.base_score, (X.shape[0], 1))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                F[:, k] += tree.predict(X)
        return F

    def _raw_proba(self, X):
        if not self.trees:  # softmax(log p) is only p up to rounding
            return np.tile(self.prior, (X.shape[0], 1))
        return softmax(self.raw_score(X))

    def _state(self):
        flat = [t for r in self.trees for t in r]
        sizes = np.array([len(t.feature) for t in flat], dtype=np.int64)
        cat = lambda attr, dt: np.concatenate([getattr(t, attr) for t in flat]).astype(dt) if flat else np.empty(0, dt)
        arrays = {
            "base_score": self.base_score,
            "prior": self.prior,
            "tree_sizes": sizes,
            "feature": cat("feature", np.int64),
            "threshold": cat("threshold", np.float64),
            "left": cat("left", np.int64),
            "right": cat("right", np.int64),
            "value": cat("value", np.float64),
            "train_loss": np.asarray(self.train_loss_, dtype=np.float64),
        }
        return {"n_rounds": len(self.trees)}, arrays

    @classmethod
    def _from_state(cls, meta, arrays):
        m = cls(0, len(arrays["base_score"]))
        m.base_score = arrays["base_score"]
        m.prior = arrays["prior"]
        m.train_loss_ = list(arrays["train_loss"])
        offsets = np.concatenate([[0], np.cumsum(arrays["tree_sizes"])])
        flat = [
            Tree(*(arrays[k][offsets[i]:offsets[i + 1]] for k in ("feature", "threshold", "left", "right", "value")))
            for i in range(len(arrays["tree_sizes"]))
        ]
        k = m.n_classes
        m.trees = [flat[r * k:(r + 1) * k] for r in range(meta["n_rounds"])]
        return m


def _log_loss(P: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(P[np.arange(len(y)), y], 1e-15, 1 - 1e-15)
    return float(-np.mean(np.log(p)))


def gbt_fit(
    X: np.ndarray,
    y: np.ndarray,
    spec: ModelSpec | dict | None = None,
    n_classes: int = N_CLASSES,
    fingerprint: str | None = None,
) -> GBTModel:
    """Fit a softmax boosted-tree ensemble.

    ``spec`` may be a :class:`ModelSpec` or a bare hyperparameter dict.
    """
    if spec is None:
        spec = ModelSpec("gbt")
    elif isinstance(spec, dict):
        spec = ModelSpec("gbt", spec)
    p = resolve_params(spec.params)
    X = np.asarray(X, dtype=np.float64)
    y = check_labels(y, n_classes)
    n, d = X.shape
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(spec.seed)

    model = GBTModel(d, n_classes, fingerprint)
    model.spec = spec
    prior = np.bincount(y, minlength=n_classes) / n
    with np.errstate(divide="ignore"):
        model.base_score = np.log(prior)
        model.prior = prior
    F = np.tile(model.base_score, (n, 1))
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    builder = _TreeBuilder(X, p) if p["num_round"] else None

    for rnd in range(p["num_round"]):
        P = softmax(F)
        G = P - Y
        H = np.maximum(2.0 * P * (1.0 - P), _HESS_FLOOR)
        if not (np.isfinite(G).all() and np.isfinite(H).all()):
            raise TrainingDivergedError(f"non-finite gradients in round {rnd}", epoch=rnd)
        if p["subsample"] < 1.0:
            k = max(1, int(round(p["subsample"] * n)))
            rows = np.sort(rng.choice(n, size=k, replace=False))
        else:
            rows = np.arange(n)
        round_trees = []
        for c in range(n_classes):
            if not np.isfinite(model.base_score[c]):
                # class absent from training: a constant zero tree keeps shapes uniform
                tree = Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([0.0]))
            else:
                tree = builder.build(G[:, c], H[:, c], rows, rng)
            round_trees.append(tree)
        for c, tree in enumerate(round_trees):
            F[:, c] += tree.predict(X)
        model.trees.append(round_trees)
        model.train_loss_.append(_log_loss(softmax(F), y))
    return model
