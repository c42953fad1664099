"""Check-in ingestion: parsing, city assignment, category mapping, anonymization, splits."""

from __future__ import annotations

import gzip
import io
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
import yaml

from geoact.activities import ACTIVITIES, ACTIVITY_INDEX, N_CLASSES
from geoact.errors import (
    EmptyDatasetError,
    IngestQualityError,
    InvalidInputError,
    TaxonomyError,
)
from geoact.geodesy import GeoPoint, haversine_many
from geoact.grid import CellId, GridFamily, geohash_encode_many

log = logging.getLogger(__name__)

DATASET_FORMAT = "geoact.dataset"
DATASET_VERSION = 1
MAX_MALFORMED_FRACTION = 0.01
DEFAULT_RADIUS_KM = 35.0
DEFAULT_ANON_RESOLUTION = 10

_FSQ_TIME_FORMAT = "%a %b %d %H:%M:%S %z %Y"


@dataclass(frozen=True, slots=True)
class RawCheckIn:
    user_id: str
    venue_id: str
    venue_category: str
    lat: float
    lon: float
    timestamp: datetime  # UTC, tz-aware
    tz_offset_minutes: int


@dataclass(frozen=True, slots=True)
class CheckIn:
    user_id: str
    venue_id: str
    cell: CellId
    local_time: datetime
    activity: str
    city: str


@dataclass(frozen=True)
class CityConfig:
    name: str
    center: GeoPoint
    assignment_radius_km: float = DEFAULT_RADIUS_KM

    def __post_init__(self) -> None:
        if not self.assignment_radius_km > 0:
            raise InvalidInputError(f"city {self.name}: radius must be positive")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lat": self.center.lat,
            "lon": self.center.lon,
            "radius_km": self.assignment_radius_km,
        }


def load_cities(path: str | Path | None = None) -> list[CityConfig]:
    """Read city centers from YAML (``cities: [{name, lat, lon, radius_km}]``).

    With no path, the bundled six-city file is used.
    """
    if path is None:
        text = resources.files("geoact.data").joinpath("cities.yaml").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    doc = yaml.safe_load(text)
    entries = doc["cities"] if isinstance(doc, dict) else doc
    return [
        CityConfig(
            str(e["name"]),
            GeoPoint(float(e["lat"]), float(e["lon"])),
            float(e.get("radius_km", DEFAULT_RADIUS_KM)),
        )
        for e in entries
    ]


@dataclass(frozen=True)
class ActivityTaxonomy:
    mapping: dict[str, str]
    activities: tuple[str, ...] = ACTIVITIES

    def __post_init__(self) -> None:
        if len(self.activities) != N_CLASSES:
            raise TaxonomyError(f"taxonomy must have exactly {N_CLASSES} parent activities")
        unknown = sorted(set(self.mapping.values()) - set(self.activities))
        if unknown:
            raise TaxonomyError(f"taxonomy maps to unknown parents: {unknown}")

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ActivityTaxonomy":
        if path is None:
            text = resources.files("geoact.data").joinpath("fsq_categories.tsv").read_text("utf-8")
        else:
            try:
                text = Path(path).read_text("utf-8")
            except FileNotFoundError as exc:
                raise TaxonomyError(f"taxonomy file not found: {path}") from exc
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise TaxonomyError(f"{path}:{lineno}: expected 2 tab-separated columns")
            mapping[parts[0].strip()] = parts[1].strip()
        return cls(mapping)


class CategoryMapper:
    """Applies a taxonomy with an unknown-category policy and counts drops."""

    def __init__(self, tax: ActivityTaxonomy, policy: str = "drop"):
        if policy not in ("drop", "error"):
            raise ValueError(f"unknown-category policy must be 'drop' or 'error', got {policy!r}")
        self.tax = tax
        self.policy = policy
        self.dropped = 0
        self.unknown: dict[str, int] = {}

    def __call__(self, raw: str) -> str | None:
        label = self.tax.mapping.get(raw)
        if label is None:
            label = self.tax.mapping.get(raw.strip())
        if label is not None:
            return label
        if self.policy == "error":
            raise TaxonomyError(f"unmapped venue category {raw!r}")
        self.dropped += 1
        self.unknown[raw] = self.unknown.get(raw, 0) + 1
        return None


def map_category(raw: str, tax: ActivityTaxonomy, policy: str = "drop") -> str | None:
    """Parent activity for ``raw``; None means the record should be dropped."""
    return CategoryMapper(tax, policy)(raw)


# -- parsing -----------------------------------------------------------------


@dataclass
class ParseReport:
    records: list[RawCheckIn]
    total_lines: int
    malformed: int
    malformed_examples: list[tuple[int, str]] = field(default_factory=list)


def _parse_time(text: str) -> datetime:
    text = text.strip()
    try:
        return datetime.strptime(text, _FSQ_TIME_FORMAT).astimezone(timezone.utc)
    except ValueError:
        pass
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _parse_line(line: str) -> RawCheckIn:
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) != 8:
        raise ValueError(f"expected 8 columns, got {len(cols)}")
    user, venue, _cat_id, cat_name, lat_s, lon_s, tz_s, time_s = cols
    lat, lon = float(lat_s), float(lon_s)
    if not (math.isfinite(lat) and math.isfinite(lon)) or not -90 <= lat <= 90 or not -180 <= lon <= 180:
        raise ValueError(f"coordinate out of range ({lat}, {lon})")
    if not user or not venue:
        raise ValueError("empty user or venue id")
    return RawCheckIn(user, venue, cat_name, lat, lon, _parse_time(time_s), int(tz_s))


def _open_text(source: str | Path | bytes | IO[bytes]) -> IO[str]:
    if isinstance(source, (str, Path)):
        raw: IO[bytes] = open(source, "rb")
    elif isinstance(source, bytes):
        raw = io.BytesIO(source)
    else:
        raw = source
    if not hasattr(raw, "peek"):
        raw = io.BufferedReader(raw)  # type: ignore[arg-type]
    if raw.peek(2)[:2] == b"\x1f\x8b":  # type: ignore[attr-defined]
        raw = gzip.GzipFile(fileobj=raw)  # type: ignore[assignment]
    return io.TextIOWrapper(raw, encoding="utf-8", errors="strict")


def parse_checkins_report(
    source: str | Path | bytes | IO[bytes],
    fmt: str = "fsq-tsv",
    max_malformed_fraction: float = MAX_MALFORMED_FRACTION,
) -> ParseReport:
    if fmt != "fsq-tsv":
        raise ValueError(f"unsupported input format {fmt!r}")
    records: list[RawCheckIn] = []
    malformed = 0
    examples: list[tuple[int, str]] = []
    total = 0
    with _open_text(source) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            total += 1
            try:
                records.append(_parse_line(line))
            except ValueError as exc:
                malformed += 1
                if len(examples) < 10:
                    examples.append((lineno, str(exc)))
    if total == 0:
        raise EmptyDatasetError("input contains no check-in lines")
    if malformed:
        log.warning("skipped %d malformed line(s) of %d; first: %s", malformed, total, examples[:3])
    if malformed / total > max_malformed_fraction:
        raise IngestQualityError(
            f"{malformed} of {total} lines malformed ({malformed / total:.2%} > {max_malformed_fraction:.0%})"
        )
    return ParseReport(records, total, malformed, examples)


def parse_checkins(source: str | Path | bytes | IO[bytes], fmt: str = "fsq-tsv") -> list[RawCheckIn]:
    """Parse tab-separated check-ins (optionally gzip-compressed).

    Columns: user_id, venue_id, category_id, category_name, lat, lon,
    tz_offset (minutes), utc_time. Malformed lines are skipped and counted;
    more than 1% of them aborts with :class:`IngestQualityError`.
    """
    return parse_checkins_report(source, fmt).records


# -- city assignment ----------------------------------------------------------


def assign_city(r: RawCheckIn, cities: Sequence[CityConfig]) -> str | None:
    idx = assign_cities(np.array([r.lat]), np.array([r.lon]), cities)[0]
    return None if idx < 0 else cities[idx].name


def assign_cities(lat: np.ndarray, lon: np.ndarray, cities: Sequence[CityConfig]) -> np.ndarray:
    """Index of the nearest city within its radius, -1 when none. Ties go to config order."""
    if not cities:
        raise ValueError("at least one city is required")
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    d = np.stack(
        [haversine_many(lat, lon, c.center.lat, c.center.lon) for c in cities], axis=1
    )
    radii = np.array([c.assignment_radius_km for c in cities])
    d = np.where(d <= radii, d, np.inf)
    best = np.argmin(d, axis=1)  # first minimum wins
    return np.where(np.isfinite(d[np.arange(len(lat)), best]), best, -1)


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    """Columnar, anonymized check-ins of one city.

    ``cell`` holds Geohash codes at ``anon_resolution``; no raw coordinates are
    kept. ``activity`` holds class indices into :data:`ACTIVITIES`.
    """

    city: str
    user_id: np.ndarray
    venue_id: np.ndarray
    cell: np.ndarray
    local_time: np.ndarray  # datetime64[s]
    activity: np.ndarray
    is_test: np.ndarray
    anon_resolution: int = DEFAULT_ANON_RESOLUTION
    split_seed: int | None = None
    test_fraction: float | None = None

    def __post_init__(self) -> None:
        self.user_id = np.asarray(self.user_id, dtype=str)
        self.venue_id = np.asarray(self.venue_id, dtype=str)
        self.cell = np.asarray(self.cell, dtype=str)
        self.local_time = np.asarray(self.local_time, dtype="datetime64[s]")
        self.activity = np.asarray(self.activity, dtype=np.int64)
        self.is_test = np.asarray(self.is_test, dtype=bool)
        n = len(self.activity)
        for name in ("user_id", "venue_id", "cell", "local_time", "is_test"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if n and (self.activity.min() < 0 or self.activity.max() >= N_CLASSES):
            raise ValueError("activity index out of range")

    def __len__(self) -> int:
        return len(self.activity)

    @property
    def summary(self) -> dict:
        return {
            "city": self.city,
            "checkins": int(len(self)),
            "venues": int(len(np.unique(self.venue_id))),
            "users": int(len(np.unique(self.user_id))),
        }

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            self.city,
            self.user_id[mask],
            self.venue_id[mask],
            self.cell[mask],
            self.local_time[mask],
            self.activity[mask],
            self.is_test[mask],
            self.anon_resolution,
            self.split_seed,
            self.test_fraction,
        )

    @property
    def train(self) -> "Dataset":
        return self.subset(~self.is_test)

    @property
    def test(self) -> "Dataset":
        return self.subset(self.is_test)

    def coarsen(self, resolution: int) -> "Dataset":
        """Re-anonymize at a coarser Geohash resolution (prefix truncation)."""
        if resolution > self.anon_resolution:
            raise ValueError(f"cannot refine {self.anon_resolution} -> {resolution}")
        out = self.subset(np.ones(len(self), dtype=bool))
        out.cell = np.asarray([c[:resolution] for c in self.cell], dtype=str) if len(self) else self.cell
        out.anon_resolution = resolution
        return out

    def records(self) -> Iterator[CheckIn]:
        for i in range(len(self)):
            yield CheckIn(
                str(self.user_id[i]),
                str(self.venue_id[i]),
                CellId(GridFamily.GEOHASH, self.anon_resolution, str(self.cell[i])),
                self.local_time[i].astype(datetime),
                ACTIVITIES[self.activity[i]],
                self.city,
            )


def build_dataset(
    raw: Sequence[RawCheckIn],
    cities: Sequence[CityConfig],
    tax: ActivityTaxonomy,
    anon_resolution: int = DEFAULT_ANON_RESOLUTION,
    unknown_policy: str = "drop",
) -> dict[str, Dataset]:
    """Filter to cities, map categories, anonymize locations, apply local time.

    Returns one :class:`Dataset` per configured city, in config order; cities
    that receive no records get an empty dataset and a warning.
    """
    mapper = CategoryMapper(tax, unknown_policy)
    keep: list[int] = []
    labels: list[int] = []
    for i, r in enumerate(raw):
        label = mapper(r.venue_category)
        if label is not None:
            keep.append(i)
            labels.append(ACTIVITY_INDEX[label])
    if mapper.dropped:
        log.info("dropped %d record(s) with unmapped categories", mapper.dropped)
    kept = [raw[i] for i in keep]
    lat = np.fromiter((r.lat for r in kept), dtype=np.float64, count=len(kept))
    lon = np.fromiter((r.lon for r in kept), dtype=np.float64, count=len(kept))
    city_idx = assign_cities(lat, lon, cities) if kept else np.empty(0, dtype=np.int64)
    cells = geohash_encode_many(lat, lon, anon_resolution) if kept else np.empty(0, dtype=str)
    local = np.array(
        [
            np.datetime64(
                (r.timestamp + timedelta(minutes=r.tz_offset_minutes)).replace(tzinfo=None), "s"
            )
            for r in kept
        ],
        dtype="datetime64[s]",
    )
    users = np.array([r.user_id for r in kept], dtype=str)
    venues = np.array([r.venue_id for r in kept], dtype=str)
    act = np.asarray(labels, dtype=np.int64)

    out: dict[str, Dataset] = {}
    for ci, city in enumerate(cities):
        m = city_idx == ci
        if not m.any():
            log.warning("city %s received no records", city.name)
        out[city.name] = Dataset(
            city.name,
            users[m],
            venues[m],
            cells[m],
            local[m],
            act[m],
            np.zeros(int(m.sum()), dtype=bool),
            anon_resolution,
        )
    return out


def _largest_remainder(sizes: np.ndarray, fraction: float) -> np.ndarray:
    quotas = sizes * fraction
    alloc = np.floor(quotas).astype(np.int64)
    target = int(math.floor(sizes.sum() * fraction + 0.5))
    rem = quotas - alloc
    order = sorted(range(len(sizes)), key=lambda k: (-rem[k], k))
    for k in order[: max(0, target - int(alloc.sum()))]:
        alloc[k] += 1
    return alloc


def stratified_assignment(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask choosing ``fraction`` of each class, per-class within one record.

    Classes with fewer than two records stay entirely unselected.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    groups = [np.flatnonzero(labels == c) for c in classes]
    small = [c for c, g in zip(classes, groups) if len(g) < 2]
    if small:
        log.warning("classes %s have <2 records; kept out of the held-out part", small)
    sizes = np.array([len(g) if len(g) >= 2 else 0 for g in groups])
    alloc = _largest_remainder(sizes, fraction)
    mask = np.zeros(len(labels), dtype=bool)
    for g, k in zip(groups, alloc):
        if k:
            mask[rng.permutation(g)[:k]] = True
    return mask


def split_dataset(d: Dataset, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Stratified, seeded train/test split."""
    out = d.subset(np.ones(len(d), dtype=bool))
    out.is_test = stratified_assignment(d.activity, test_fraction, seed)
    out.split_seed = seed
    out.test_fraction = test_fraction
    return out


# -- serialization -------------------------------------------------------------


def write_dataset(d: Dataset, path: str | Path, config_hash: str | None = None) -> None:
    """Line-delimited JSON: one header line, then one record per line."""
    path = Path(path)
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "city": d.city,
        "anonymization": f"{GridFamily.GEOHASH.value}:{d.anon_resolution}",
        "split_seed": d.split_seed,
        "test_fraction": d.test_fraction,
        "config_hash": config_hash,
        "activities": list(ACTIVITIES),
    }
    times = d.local_time.astype(str)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        prefix = f"{GridFamily.GEOHASH.value}:{d.anon_resolution}:"
        for i in range(len(d)):
            fh.write(
                json.dumps(
                    {
                        "user": str(d.user_id[i]),
                        "venue": str(d.venue_id[i]),
                        "cell": prefix + str(d.cell[i]),
                        "local_time": str(times[i]),
                        "activity": ACTIVITIES[d.activity[i]],
                        "split": "test" if d.is_test[i] else "train",
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: not a {DATASET_FORMAT} v{DATASET_VERSION} file")
        rows = [json.loads(line) for line in fh if line.strip()]
    res = int(header["anonymization"].split(":")[1])
    cut = len(f"gh:{res}:")
    return Dataset(
        header["city"],
        [r["user"] for r in rows],
        [r["venue"] for r in rows],
        [r["cell"][cut:] for r in rows],
        np.array([r["local_time"] for r in rows], dtype="datetime64[s]"),
        [ACTIVITY_INDEX[r["activity"]] for r in rows],
        [r["split"] == "test" for r in rows],
        res,
        header.get("split_seed"),
        header.get("test_fraction"),
    )


def table_summary(datasets: Iterable[Dataset]) -> dict:
    """Per-city counts plus a total row, mirroring the usual dataset summary table."""
    rows = [d.summary for d in datasets]
    return {
        "cities": rows,
        "total": {
            "checkins": sum(r["checkins"] for r in rows),
            "venues": sum(r["venues"] for r in rows),
            "users": sum(r["users"] for r in rows),
        },
    }
