"""k-nearest-neighbour classifier over standardized features."""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from geoact.activities import N_CLASSES
from geoact.errors import InvalidHyperparameterError
from geoact.models.base import ModelSpec, Standardizer, TrainedModel, check_labels

METRICS = ("L1", "L2")


@njit(cache=True, parallel=True)
def _knn_indices(train, query, k, l1):
    """Indices of the k nearest rows, ordered by (distance, row index)."""
    nq = query.shape[0]
    n, d = train.shape
    out = np.empty((nq, k), dtype=np.int64)
    for q in prange(nq):
        best_d = np.full(k, np.inf)
        best_i = np.full(k, n, dtype=np.int64)
        qrow = query[q]
        for i in range(n):
            s = 0.0
            if l1:
                for j in range(d):
                    s += abs(train[i, j] - qrow[j])
            else:
                for j in range(d):
                    t = train[i, j] - qrow[j]
                    s += t * t
            # rows arrive in index order, so "<" keeps the lower index on ties
            if s < best_d[k - 1]:
                pos = k - 1
                while pos > 0 and s < best_d[pos - 1]:
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = s
                best_i[pos] = i
        out[q] = best_i
    return out


class KNNModel(TrainedModel):
    family = "knn"

    def __init__(self, n_features, n_classes=N_CLASSES, fingerprint=None):
        super().__init__(n_features, n_classes, fingerprint)
        self.k = 1
        self.metric = "L2"
        self.scaler: Standardizer | None = None
        self.X: np.ndarray = np.empty((0, n_features))
        self.y: np.ndarray = np.empty(0, dtype=np.int64)

    def neighbors(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        Z = self.scaler.transform(X) if self.scaler is not None else X
        return _knn_indices(self.X, np.ascontiguousarray(Z), self.k, self.metric == "L1")

    def _raw_proba(self, X):
        Z = self.scaler.transform(X) if self.scaler is not None else X
        idx = _knn_indices(self.X, np.ascontiguousarray(Z), self.k, self.metric == "L1")
        labels = self.y[idx]
        P = np.zeros((X.shape[0], self.n_classes))
        for j in range(self.k):
            P[np.arange(X.shape[0]), labels[:, j]] += 1.0
        return P / self.k

    def _state(self):
        arrays = {"X": self.X, "y": self.y}
        if self.scaler is not None:
            arrays["mean"], arrays["scale"] = self.scaler.mean, self.scaler.scale
        return {"k": self.k, "metric": self.metric}, arrays

    @classmethod
    def _from_state(cls, meta, arrays):
        m = cls(arrays["X"].shape[1])
        m.k, m.metric = meta["k"], meta["metric"]
        m.X, m.y = np.ascontiguousarray(arrays["X"]), arrays["y"]
        if "mean" in arrays:
            m.scaler = Standardizer(arrays["mean"], arrays["scale"])
        return m


def knn_fit(
    X: np.ndarray,
    y: np.ndarray,
    spec: ModelSpec | dict | None = None,
    n_classes: int = N_CLASSES,
    fingerprint: str | None = None,
) -> KNNModel:
    """Store the (standardized) training set. Params: ``k``, ``metric``, ``standardize``."""
    if spec is None:
        spec = ModelSpec("knn")
    elif isinstance(spec, dict):
        spec = ModelSpec("knn", spec)
    params = {"k": 5, "metric": "L2", "standardize": True, **spec.params}
    unknown = set(params) - {"k", "metric", "standardize"}
    if unknown:
        raise InvalidHyperparameterError(f"unknown k-NN hyperparameters: {sorted(unknown)}")
    X = np.asarray(X, dtype=np.float64)
    y = check_labels(y, n_classes)
    k = int(params["k"])
    if not 1 <= k <= len(X):
        raise InvalidHyperparameterError(f"k={k} must lie in [1, {len(X)}]")
    if params["metric"] not in METRICS:
        raise InvalidHyperparameterError(f"metric must be one of {METRICS}")
    m = KNNModel(X.shape[1], n_classes, fingerprint)
    m.spec = spec
    m.k, m.metric = k, params["metric"]
    if params["standardize"]:
        m.scaler = Standardizer().fit(X)
        m.X = np.ascontiguousarray(m.scaler.transform(X))
    else:
        m.X = np.ascontiguousarray(X)
    m.y = y
    return m
