"""Shared model plumbing: specs, the trained-model contract and model files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar

import numpy as np

from geoact.activities import N_CLASSES
from geoact.errors import DimensionError, MissingArtifactError

MODEL_FORMAT = "geoact.model"
MODEL_VERSION = 1
FAMILIES = ("knn", "gbt", "mlp", "rmlp")


@dataclass
class ModelSpec:
    family: str
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")

    def to_dict(self) -> dict:
        return {"family": self.family, "params": _jsonable(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["family"], dict(d.get("params", {})), int(d.get("seed", 0)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Standardizer:
    """Column-wise (x - mean) / std with zero-variance columns left unscaled."""

    def __init__(self, mean: np.ndarray | None = None, scale: np.ndarray | None = None):
        self.mean = mean
        self.scale = scale

    def fit(self, X: np.ndarray) -> "Standardizer":
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale = np.where(std > 0, std, 1.0)
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


class TrainedModel:
    """A fitted classifier over the nine activities.

    Subclasses implement ``_raw_proba`` and the ``_state``/``_from_state``
    pair used for model files.
    """

    family: ClassVar[str] = ""

    def __init__(self, n_features: int, n_classes: int = N_CLASSES, fingerprint: str | None = None):
        self.n_features = n_features
        self.n_classes = n_classes
        self.fingerprint = fingerprint
        self.spec: ModelSpec | None = None
        # free-form provenance (city, feature spec, run config) carried in model files
        self.context: dict = {}

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionError(f"model expects {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self._raw_proba(self._check(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)  # first maximum = lowest class index

    def _raw_proba(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _state(self) -> tuple[dict, dict[str, np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def _from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "TrainedModel":
        raise NotImplementedError

    def save(self, path: str | Path) -> None:
        meta, arrays = self._state()
        header = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "family": self.family,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "fingerprint": self.fingerprint,
            "spec": self.spec.to_dict() if self.spec else None,
            "meta": _jsonable(meta),
            "context": _jsonable(self.context),
        }
        with open(path, "wb") as fh:
            np.savez_compressed(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_model(path: str | Path, expected_fingerprint: str | None = None) -> TrainedModel:
    """Load a model file, refusing it when the feature fingerprint differs."""
    from geoact.models import MODEL_CLASSES

    if not Path(path).is_file():
        raise MissingArtifactError(f"model file not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} v{MODEL_VERSION} file")
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise DimensionError(
            f"feature fingerprint mismatch: model {header['fingerprint']}, data {expected_fingerprint}"
        )
    cls = MODEL_CLASSES[header["family"]]
    model = cls._from_state(header["meta"], arrays)
    model.n_features = header["n_features"]
    model.n_classes = header["n_classes"]
    model.fingerprint = header["fingerprint"]
    model.spec = ModelSpec.from_dict(header["spec"]) if header["spec"] else None
    model.context = header.get("context") or {}
    return model


def check_labels(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be a 1-d array of class indices")
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)
