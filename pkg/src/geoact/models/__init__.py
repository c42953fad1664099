"""Native classifiers returning probabilities over the nine activities."""

import warnings

import numpy as np

# numba probes for an old TBB on import of parallel kernels and falls back to
# its own threading layer; the notice is not actionable for users
warnings.filterwarnings("ignore", message="The TBB threading layer")

from geoact.activities import N_CLASSES  # noqa: E402
from geoact.models.base import ModelSpec, Standardizer, TrainedModel, load_model  # noqa: E402
from geoact.models.gbt import GBTModel, gbt_fit  # noqa: E402
from geoact.models.knn import KNNModel, knn_fit  # noqa: E402
from geoact.models.mlp import MLPModel, RMLPModel, mlp_fit, rmlp_fit  # noqa: E402

MODEL_CLASSES: dict[str, type[TrainedModel]] = {
    "knn": KNNModel,
    "gbt": GBTModel,
    "mlp": MLPModel,
    "rmlp": RMLPModel,
}

_FITTERS = {"knn": knn_fit, "gbt": gbt_fit, "mlp": mlp_fit, "rmlp": rmlp_fit}


def fit(
    spec: ModelSpec,
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int = N_CLASSES,
    fingerprint: str | None = None,
) -> TrainedModel:
    """Train the model family named by ``spec``."""
    return _FITTERS[spec.family](X, y, spec, n_classes=n_classes, fingerprint=fingerprint)


__all__ = [
    "GBTModel",
    "KNNModel",
    "MLPModel",
    "MODEL_CLASSES",
    "ModelSpec",
    "RMLPModel",
    "Standardizer",
    "TrainedModel",
    "fit",
    "gbt_fit",
    "knn_fit",
    "load_model",
    "mlp_fit",
    "rmlp_fit",
]
