"""Metrics, confusion matrices, ablation runs and map exports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from geoact.activities import ACTIVITIES, N_CLASSES
from geoact.errors import DimensionError, GeoActError, InvalidInputError
from geoact.features import FeatureExtractor, FeatureSpec
from geoact.grid import GridFamily, ResolutionLadder, decode, encode_many
from geoact.ingest import CityConfig, Dataset
from geoact.models.base import ModelSpec, TrainedModel

log = logging.getLogger(__name__)

PROB_CLIP = 1e-15
SIMPLEX_TOL = 1e-6


def _labels(labels, n: int | None = None) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise InvalidInputError("labels must be one-dimensional")
    if n is not None and len(y) != n:
        raise InvalidInputError(f"{n} predictions but {len(y)} labels")
    if len(y) and (y.min() < 0 or y.max() >= N_CLASSES):
        raise InvalidInputError(f"labels must be class indices in [0, {N_CLASSES})")
    return y.astype(np.int64)


def log_loss(probs, labels) -> float:
    """Mean -ln p(true class), probabilities clipped to [1e-15, 1 - 1e-15]."""
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim != 2:
        raise InvalidInputError("probabilities must be a 2-d array")
    y = _labels(labels, len(P))
    if len(y) == 0:
        raise InvalidInputError("log loss of an empty set")
    p = np.clip(P[np.arange(len(y)), y], PROB_CLIP, 1 - PROB_CLIP)
    return float(-np.mean(np.log(p)))


def precision_recall_f1(preds, labels, n_classes: int = N_CLASSES):
    """Per-class precision, recall, F1 and support; 0/0 counts as 0."""
    counts = confusion_counts(preds, labels, n_classes)
    tp = np.diag(counts).astype(np.float64)
    predicted = counts.sum(axis=0)
    support = counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1, support


def macro_f1(preds, labels, n_classes: int = N_CLASSES) -> tuple[float, np.ndarray]:
    """Unweighted mean F1 over classes present in ``labels``, plus all per-class F1s."""
    y = _labels(labels)
    if len(y) == 0:
        raise InvalidInputError("macro-F1 of an empty set")
    _, _, f1, support = precision_recall_f1(preds, y, n_classes)
    return float(f1[support > 0].mean()), f1


def confusion_counts(preds, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    y = _labels(labels)
    p = _labels(preds, len(y))
    return np.bincount(y * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    normalized: np.ndarray
    unsupported: np.ndarray  # rows with no true records; left at zero

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, labels, normalize: bool = True, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    counts = confusion_counts(preds, labels, n_classes)
    rows = counts.sum(axis=1)
    unsupported = rows == 0
    norm = np.zeros(counts.shape, dtype=np.float64)
    if normalize:
        norm[~unsupported] = counts[~unsupported] / rows[~unsupported, None]
    return ConfusionMatrix(counts, norm, unsupported)


@dataclass
class MetricsReport:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    macro_f1: float
    log_loss: float
    accuracy: float
    n: int
    config_fingerprint: str | None = None
    seed: int | None = None
    split_fingerprint: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        per_class = {
            a: {"precision": p, "recall": r, "f1": f, "support": s}
            for a, p, r, f, s in zip(ACTIVITIES, self.precision, self.recall, self.f1, self.support)
        }
        return {
            "macro_f1": self.macro_f1,
            "log_loss": self.log_loss,
            "accuracy": self.accuracy,
            "n": self.n,
            "per_class": per_class,
            "f1_convention": "0/0 -> 0; macro mean over classes present in labels",
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "split_fingerprint": self.split_fingerprint,
            **({"extra": self.extra} if self.extra else {}),
        }


def metrics_report(
    probs: np.ndarray,
    labels,
    config_fingerprint: str | None = None,
    seed: int | None = None,
    split_fingerprint: str | None = None,
) -> MetricsReport:
    P = np.asarray(probs, dtype=np.float64)
    y = _labels(labels, len(P))
    preds = np.argmax(P, axis=1)
    precision, recall, f1, support = precision_recall_f1(preds, y)
    macro, _ = macro_f1(preds, y)
    return MetricsReport(
        [float(v) for v in precision],
        [float(v) for v in recall],
        [float(v) for v in f1],
        [int(v) for v in support],
        macro,
        log_loss(P, y),
        float(np.mean(preds == y)),
        int(len(y)),
        config_fingerprint,
        seed,
        split_fingerprint,
    )


def evaluate_model(model: TrainedModel, X: np.ndarray, y, **kwargs) -> MetricsReport:
    return metrics_report(model.predict_proba(X), y, **kwargs)


# external-model bridge -------------------------------------------------------


def read_probability_file(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Line-delimited JSON ``{"id": ..., "probs": [9 floats]}``, checked against the simplex."""
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            p = np.asarray(d["probs"], dtype=np.float64)
            if p.shape != (N_CLASSES,) or np.any(p < 0) or abs(p.sum() - 1) > SIMPLEX_TOL:
                raise InvalidInputError(f"{path}:{lineno}: not a {N_CLASSES}-class probability vector")
            ids.append(str(d["id"]))
            rows.append(p)
    return ids, np.vstack(rows) if rows else np.empty((0, N_CLASSES))


def write_probability_file(path: str | Path, ids: Sequence, probs: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in zip(ids, probs):
            fh.write(json.dumps({"id": str(i), "probs": [float(v) for v in p]}) + "\n")


# ablation --------------------------------------------------------------------

AXES = ("grid_resolution", "relative_location", "grid_statistics", "grid_count", "scale_count")
_AXIS_FIELDS = {
    "grid_resolution": {"ladder"},
    "relative_location": {"include_distance", "include_bearing"},
    "grid_statistics": {"include_poi", "include_users", "include_checkins"},
    "grid_count": {"ladder"},
    "scale_count": {"ladder"},
}


def _changed_fields(a: FeatureSpec, b: FeatureSpec) -> set[str]:
    da, db = a.to_dict(), b.to_dict()
    return {k for k in da if da[k] != db[k]}


@dataclass
class AblationPlan:
    axis: str
    base: FeatureSpec
    variants: list[tuple[str, FeatureSpec]]

    def __post_init__(self) -> None:
        if self.axis not in AXES:
            raise ValueError(f"unknown ablation axis {self.axis!r}; expected one of {AXES}")
        allowed = _AXIS_FIELDS[self.axis]
        for name, spec in self.variants:
            extra = _changed_fields(self.base, spec) - allowed
            if extra:
                raise ValueError(f"variant {name!r} changes {sorted(extra)} outside axis {self.axis}")

    @classmethod
    def for_axis(cls, axis: str, base: FeatureSpec | None = None) -> "AblationPlan":
        """Standard variants for ``axis`` derived from ``base``."""
        base = base or FeatureSpec()
        lad = base.ladder.resolutions
        fams = list(lad)
        all_res = sorted({r for rs in lad.values() for r in rs})
        variants: list[tuple[str, FeatureSpec]] = []
        if axis == "grid_resolution":
            fam = fams[0]
            for r in sorted(lad[fam], reverse=True):
                variants.append((f"{fam.value}{r}", base.replace(ladder=ResolutionLadder({fam: (r,)}))))
        elif axis == "relative_location":
            variants = [
                ("distance+bearing", base.replace(include_distance=True, include_bearing=True)),
                ("distance", base.replace(include_distance=True, include_bearing=False)),
                ("bearing", base.replace(include_distance=False, include_bearing=True)),
                ("none", base.replace(include_distance=False, include_bearing=False)),
            ]
        elif axis == "grid_statistics":
            full = dict(include_poi=True, include_users=True, include_checkins=True)
            variants.append(("poi+users+checkins", base.replace(**full)))
            for name in ("poi", "users", "checkins"):
                variants.append((f"without_{name}", base.replace(**{**full, f"include_{name}": False})))
            variants.append(("none", base.replace(include_poi=False, include_users=False, include_checkins=False)))
        elif axis == "grid_count":
            for fam in fams:
                variants.append((fam.value, base.replace(ladder=ResolutionLadder({fam: lad[fam]}))))
            if len(fams) > 1:
                variants.append(("+".join(f.value for f in fams), base))
        elif axis == "scale_count":
            for r in all_res:
                single = {f: (r,) for f in fams if r in lad[f]}
                variants.append((f"single_{r}", base.replace(ladder=ResolutionLadder(single))))
            variants.append(("multi", base))
        else:
            raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
        return cls(axis, base, variants)


def split_fingerprint(d: Dataset) -> str:
    h = hashlib.sha256()
    h.update(str((d.split_seed, d.test_fraction, len(d))).encode())
    h.update(np.packbits(d.is_test).tobytes())
    return h.hexdigest()[:16]


def evaluate_spec(
    feature_spec: FeatureSpec,
    data: Dataset,
    city: CityConfig,
    model_spec: ModelSpec,
    fit_fn=None,
) -> tuple[MetricsReport, TrainedModel, np.ndarray]:
    """Extract features, train on the train split and score the test split."""
    from geoact.models import fit

    fit_fn = fit_fn or (lambda s, X, y: fit(s, X, y, fingerprint=feature_spec.fingerprint()))
    train, test = data.train, data.test
    ext = FeatureExtractor(feature_spec, city).fit(train)
    X_tr, X_te = ext.transform(train), ext.transform(test)
    model = fit_fn(model_spec, X_tr, train.activity)
    probs = model.predict_proba(X_te)
    report = metrics_report(
        probs, test.activity, feature_spec.fingerprint(), model_spec.seed, split_fingerprint(data)
    )
    report.extra["dimension"] = feature_spec.dimension
    return report, model, probs


@dataclass
class AblationRow:
    variant: str
    spec: FeatureSpec
    report: MetricsReport | None
    error: str | None = None


def run_ablation(
    plan: AblationPlan,
    data: Dataset,
    city: CityConfig,
    model_spec: ModelSpec,
    fit_fn=None,
) -> list[AblationRow]:
    """Evaluate every variant on the same split and model seed.

    A variant that fails (for example on a dimension mismatch) is recorded
    with its error and the run continues.
    """
    rows = []
    for name, spec in plan.variants:
        try:
            report, _, _ = evaluate_spec(spec, data, city, model_spec, fit_fn)
            rows.append(AblationRow(name, spec, report))
        except (GeoActError, DimensionError, ValueError) as exc:
            log.warning("ablation variant %s failed: %s", name, exc)
            rows.append(AblationRow(name, spec, None, f"{type(exc).__name__}: {exc}"))
    splits = {r.report.split_fingerprint for r in rows if r.report}
    seeds = {r.report.seed for r in rows if r.report}
    assert len(splits) <= 1 and len(seeds) <= 1, "ablation variants must share split and seed"
    return rows


def write_ablation_csv(path: str | Path, axis: str, rows: Sequence[AblationRow], config_hash: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["axis", "variant", "dimension", "macro_f1", "log_loss", "accuracy"]
            + [f"f1_{a}" for a in ACTIVITIES]
            + ["split_fingerprint", "seed", "config_hash", "error"]
        )
        for r in rows:
            if r.report is None:
                w.writerow([axis, r.variant, r.spec.dimension, "", "", ""] + [""] * N_CLASSES + ["", "", config_hash or "", r.error])
                continue
            rep = r.report
            w.writerow(
                [axis, r.variant, r.spec.dimension, repr(rep.macro_f1), repr(rep.log_loss), repr(rep.accuracy)]
                + [repr(v) for v in rep.f1]
                + [rep.split_fingerprint, rep.seed, config_hash or "", ""]
            )


# writers ---------------------------------------------------------------------


def write_metrics_json(path: str | Path, report: MetricsReport, config_hash: str | None = None, config: dict | None = None) -> None:
    d = report.to_dict()
    d["config_hash"] = config_hash
    if config is not None:
        d["config"] = config
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_confusion_csv(path_counts: str | Path, path_normalized: str | Path, cm: ConfusionMatrix, config_hash: str | None = None) -> None:
    for path, mat, fmt in ((path_counts, cm.counts, str), (path_normalized, cm.normalized, repr)):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            w.writerow(["true\\predicted", *ACTIVITIES, "unsupported"])
            for i, a in enumerate(ACTIVITIES):
                w.writerow([a, *[fmt(v.item()) for v in mat[i]], int(cm.unsupported[i])])


# map export ------------------------------------------------------------------


def _modal(counts: np.ndarray) -> int:
    return int(np.argmax(counts))  # lowest class index on ties


def _ring(box) -> list[list[float]]:
    # counter-clockwise exterior ring in (lon, lat) order, closed
    w, e, s, n = box.lon_min, box.lon_max, box.lat_min, box.lat_max
    return [[w, s], [e, s], [e, n], [w, n], [w, s]]


@dataclass
class MapExport:
    inferred: dict
    truth: dict
    agreement_rate: float  # fraction of cells whose modal predicted == modal true activity
    weighted_agreement_rate: float  # same, weighting cells by record count
    n_cells: int


def map_cells(cells: Sequence[str], family: GridFamily | str, resolution: int) -> np.ndarray:
    """Re-index Geohash record cells at the map's (family, resolution)."""
    cells = np.asarray(cells, dtype=str)
    family = GridFamily(family)
    if family is GridFamily.GEOHASH and all(len(c) >= resolution for c in cells):
        return np.array([c[:resolution] for c in cells], dtype=str)
    uniq, inv = np.unique(cells, return_inverse=True)
    centers = [decode(c).center for c in uniq]
    lat = np.array([p.lat for p in centers])
    lon = np.array([p.lon for p in centers])
    return encode_many(lat, lon, family, resolution)[inv.ravel()]


def export_geojson(
    cells: Sequence[str],
    predictions,
    labels,
    resolution: int,
    family: GridFamily | str = GridFamily.GEOHASH,
    config_hash: str | None = None,
) -> MapExport:
    """Aggregate per-record predictions and truths into per-cell polygons."""
    from geoact.grid import CellId

    family = GridFamily(family)
    y = _labels(labels)
    p = _labels(predictions, len(y))
    codes = map_cells(cells, family, resolution)
    uniq, inv = np.unique(codes, return_inverse=True)
    inv = inv.ravel()
    pred_counts = np.zeros((len(uniq), N_CLASSES), dtype=np.int64)
    true_counts = np.zeros((len(uniq), N_CLASSES), dtype=np.int64)
    np.add.at(pred_counts, (inv, p), 1)
    np.add.at(true_counts, (inv, y), 1)

    inferred, truth = [], []
    agree = np.zeros(len(uniq), dtype=bool)
    for i, code in enumerate(uniq):
        cell = CellId(family, resolution, str(code))
        ring = _ring(decode(cell).box)
        mp, mt = _modal(pred_counts[i]), _modal(true_counts[i])
        agree[i] = mp == mt
        common = {
            "cell": str(cell),
            "n": int(true_counts[i].sum()),
            "modal_predicted": ACTIVITIES[mp],
            "modal_true": ACTIVITIES[mt],
            "modal_agreement": bool(agree[i]),
        }
        for counts, modal, out in ((pred_counts[i], mp, inferred), (true_counts[i], mt, truth)):
            out.append(
                {
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": [ring]},
                    "properties": {
                        **common,
                        "activity": ACTIVITIES[modal],
                        "counts": {a: int(c) for a, c in zip(ACTIVITIES, counts)},
                    },
                }
            )
    sizes = true_counts.sum(axis=1)
    rate = float(agree.mean()) if len(uniq) else 0.0
    weighted = float((agree * sizes).sum() / sizes.sum()) if len(uniq) else 0.0
    meta = {"resolution": resolution, "family": family.value, "modal_agreement_rate": rate,
            "weighted_modal_agreement_rate": weighted, "config_hash": config_hash}
    return MapExport(
        {"type": "FeatureCollection", "properties": {**meta, "layer": "inferred"}, "features": inferred},
        {"type": "FeatureCollection", "properties": {**meta, "layer": "ground_truth"}, "features": truth},
        rate,
        weighted,
        len(uniq),
    )


def _signed_area(ring: Sequence[Sequence[float]]) -> float:
    return 0.5 * sum(x0 * y1 - x1 * y0 for (x0, y0), (x1, y1) in zip(ring, ring[1:]))


def validate_geojson(fc: dict) -> list[str]:
    """Structural problems in a polygon FeatureCollection; empty when valid."""
    errors = []
    if fc.get("type") != "FeatureCollection" or not isinstance(fc.get("features"), list):
        return ["top level must be a FeatureCollection with a features list"]
    for k, feat in enumerate(fc["features"]):
        geom = feat.get("geometry") or {}
        if feat.get("type") != "Feature" or geom.get("type") != "Polygon":
            errors.append(f"feature {k}: not a Polygon Feature")
            continue
        for j, ring in enumerate(geom.get("coordinates", [])):
            if len(ring) < 4 or ring[0] != ring[-1]:
                errors.append(f"feature {k} ring {j}: not a closed ring of >= 4 positions")
                continue
            if any(len(pt) < 2 or not (-180 <= pt[0] <= 180 and -90 <= pt[1] <= 90) for pt in ring):
                errors.append(f"feature {k} ring {j}: position outside lon/lat bounds")
            area = _signed_area(ring)
            if (j == 0 and area <= 0) or (j > 0 and area >= 0):
                errors.append(f"feature {k} ring {j}: wrong winding order")
    return errors


def write_geojson(path: str | Path, fc: dict) -> None:
    Path(path).write_text(json.dumps(fc, sort_keys=True) + "\n", encoding="utf-8")
