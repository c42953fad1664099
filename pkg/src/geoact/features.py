"""Check-in enrichment and feature-vector assembly.

Vector layout, in order:

    user (2) | time (5) | cell ordinal per (family, resolution)
    | distance, bearing | (poi, users, checkins, seen) per (family, resolution)

Grid statistics, cell ordinals and user features are fitted on the training
split only.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from geoact.activities import ACTIVITIES, ACTIVITY_INDEX, N_CLASSES
from geoact.errors import DimensionError, EmptyStatsError
from geoact.geodesy import GeoPoint, bearing_many, bearing_or_zero, haversine_distance, haversine_many
from geoact.grid import CellId, GridFamily, ResolutionLadder, decode, encode, encode_many, geohash_decode_box
from geoact.ingest import CheckIn, CityConfig, Dataset

TIME_WIDTH = 5
USER_WIDTH = 2
STAT_NAMES = ("poi", "users", "checkins")


def default_ladder() -> ResolutionLadder:
    return ResolutionLadder.build([GridFamily.GEOHASH, GridFamily.OFFSET_GEOHASH], range(4, 11))


@dataclass(frozen=True)
class FeatureSpec:
    ladder: ResolutionLadder = field(default_factory=default_ladder)
    include_time: bool = True
    include_user: bool = True
    include_cells: bool = True
    include_distance: bool = True
    include_bearing: bool = True
    include_poi: bool = True
    include_users: bool = True
    include_checkins: bool = True

    @property
    def stats(self) -> tuple[str, ...]:
        flags = (self.include_poi, self.include_users, self.include_checkins)
        return tuple(s for s, on in zip(STAT_NAMES, flags) if on)

    @property
    def stats_width(self) -> int:
        k = len(self.stats)
        return k + 1 if k else 0

    @property
    def dimension(self) -> int:
        pairs = len(self.ladder.pairs())
        return (
            USER_WIDTH * self.include_user
            + TIME_WIDTH * self.include_time
            + pairs * self.include_cells
            + self.include_distance
            + self.include_bearing
            + pairs * self.stats_width
        )

    def column_names(self) -> list[str]:
        tags = [f"{fam.value}{r}" for fam, r in self.ladder.pairs()]
        cols: list[str] = []
        if self.include_user:
            cols += ["user_log_count", "user_modal_activity"]
        if self.include_time:
            cols += ["hour_sin", "hour_cos", "dow_sin", "dow_cos", "weekend"]
        if self.include_cells:
            cols += [f"cell_{t}" for t in tags]
        if self.include_distance:
            cols.append("distance_km")
        if self.include_bearing:
            cols.append("bearing_deg")
        if self.stats:
            for t in tags:
                cols += [f"{s}_{t}" for s in self.stats] + [f"seen_{t}"]
        return cols

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ladder"] = self.ladder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        d = dict(d)
        if "ladder" in d:
            d["ladder"] = ResolutionLadder.from_dict(d["ladder"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "FeatureSpec":
        d = {**self.__dict__, **changes}
        return FeatureSpec(**d)


@dataclass
class GridStats:
    """Per-cell unique-POI, unique-user and check-in counts at one (family, resolution)."""

    family: GridFamily
    resolution: int
    cells: np.ndarray  # sorted codes
    poi: np.ndarray
    users: np.ndarray
    checkins: np.ndarray

    def __len__(self) -> int:
        return len(self.cells)

    def __getitem__(self, code: str) -> tuple[int, int, int]:
        i = int(np.searchsorted(self.cells, code))
        if i >= len(self.cells) or self.cells[i] != code:
            raise KeyError(code)
        return int(self.poi[i]), int(self.users[i]), int(self.checkins[i])

    def __contains__(self, code: str) -> bool:
        i = int(np.searchsorted(self.cells, code))
        return i < len(self.cells) and self.cells[i] == code

    def as_dict(self) -> dict[str, tuple[int, int, int]]:
        return {str(c): (int(p), int(u), int(k)) for c, p, u, k in zip(self.cells, self.poi, self.users, self.checkins)}

    def lookup(self, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(position, seen) for each code; ``position`` is the sorted insertion index."""
        codes = np.asarray(codes, dtype=str)
        if len(self.cells) == 0:
            return np.zeros(len(codes), dtype=np.int64), np.zeros(len(codes), dtype=bool)
        pos = np.searchsorted(self.cells, codes)
        clipped = np.minimum(pos, len(self.cells) - 1)
        seen = self.cells[clipped] == codes
        return pos, seen


def grid_stats_from_codes(
    codes: np.ndarray, users: np.ndarray, venues: np.ndarray, family: GridFamily, resolution: int
) -> GridStats:
    codes = np.asarray(codes, dtype=str)
    if len(codes) == 0:
        raise EmptyStatsError("cannot compute grid statistics from an empty training set")
    cells, cell_idx = np.unique(codes, return_inverse=True)
    cell_idx = cell_idx.ravel()
    n_cells = len(cells)
    checkins = np.bincount(cell_idx, minlength=n_cells)

    def distinct_per_cell(tokens: np.ndarray) -> np.ndarray:
        _, tok_idx = np.unique(np.asarray(tokens, dtype=str), return_inverse=True)
        pairs = np.unique(cell_idx.astype(np.int64) * (int(tok_idx.max()) + 1) + tok_idx.ravel())
        return np.bincount(pairs // (int(tok_idx.max()) + 1), minlength=n_cells)

    return GridStats(
        GridFamily(family), resolution, cells, distinct_per_cell(venues), distinct_per_cell(users), checkins
    )


def cell_centers(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center lat/lon of Geohash codes."""
    lat = np.empty(len(codes))
    lon = np.empty(len(codes))
    for i, c in enumerate(codes):
        b = geohash_decode_box(str(c))
        lat[i] = (b.lat_min + b.lat_max) / 2
        lon[i] = (b.lon_min + b.lon_max) / 2
    return lat, lon


def _codes_for_pairs(anon_cells: np.ndarray, pairs: Sequence[tuple[GridFamily, int]]) -> dict:
    """Per-record codes for every (family, resolution), computed once per unique cell."""
    uniq, inv = np.unique(np.asarray(anon_cells, dtype=str), return_inverse=True)
    inv = inv.ravel()
    lat, lon = cell_centers(uniq)
    return {(fam, r): encode_many(lat, lon, fam, r)[inv] for fam, r in pairs}


def compute_grid_stats(train: Dataset, family: GridFamily, resolution: int) -> GridStats:
    """Grid statistics from a (training) dataset at one (family, resolution)."""
    if len(train) == 0:
        raise EmptyStatsError("cannot compute grid statistics from an empty training set")
    codes = _codes_for_pairs(train.cell, [(GridFamily(family), resolution)])[(GridFamily(family), resolution)]
    return grid_stats_from_codes(codes, train.user_id, train.venue_id, family, resolution)


def relative_location(cell: CellId | str, center: GeoPoint) -> tuple[float, float]:
    """Distance (km) and bearing (deg) from the cell's center towards ``center``."""
    c = decode(cell).center
    return haversine_distance(c, center), bearing_or_zero(c, center)


def encode_timestamp(local_time: datetime | np.datetime64) -> np.ndarray:
    """Cyclic hour-of-day and day-of-week, plus a weekend flag (Monday is day 0)."""
    return encode_timestamps(np.array([np.datetime64(local_time, "s")]))[0]


def encode_timestamps(local_time: np.ndarray) -> np.ndarray:
    t = np.asarray(local_time, dtype="datetime64[s]").astype(np.int64)
    day = np.floor_divide(t, 86400)
    sec = t - day * 86400
    dow = (day + 3) % 7  # 1970-01-01 was a Thursday
    h = 2 * np.pi * sec / 86400.0
    d = 2 * np.pi * dow / 7.0
    return np.column_stack([np.sin(h), np.cos(h), np.sin(d), np.cos(d), (dow >= 5).astype(np.float64)])


@dataclass
class UserStats:
    users: np.ndarray  # sorted ids
    counts: np.ndarray
    modal: np.ndarray

    @classmethod
    def fit(cls, user_id: np.ndarray, activity: np.ndarray) -> "UserStats":
        users, inv = np.unique(np.asarray(user_id, dtype=str), return_inverse=True)
        inv = inv.ravel()
        table = np.zeros((len(users), N_CLASSES), dtype=np.int64)
        np.add.at(table, (inv, np.asarray(activity)), 1)
        return cls(users, table.sum(axis=1), table.argmax(axis=1))  # argmax: lowest index on ties

    def encode(self, user_id: np.ndarray) -> np.ndarray:
        user_id = np.asarray(user_id, dtype=str)
        out = np.tile(np.array([0.0, -1.0]), (len(user_id), 1))
        if len(self.users) == 0:
            return out
        pos = np.minimum(np.searchsorted(self.users, user_id), len(self.users) - 1)
        seen = self.users[pos] == user_id
        out[seen, 0] = np.log1p(self.counts[pos[seen]])
        out[seen, 1] = self.modal[pos[seen]]
        return out


def encode_user(user_id: str, train_user_ids: np.ndarray, train_activity: np.ndarray) -> np.ndarray:
    """(log1p training check-ins, modal training activity) or (0, -1) for unseen users."""
    return UserStats.fit(train_user_ids, train_activity).encode(np.array([user_id]))[0]


@dataclass
class FeatureVector:
    values: np.ndarray
    label: str
    record_id: int | str


class FeatureExtractor:
    """Fits training-only statistics for one city and turns datasets into matrices."""

    def __init__(self, spec: FeatureSpec, city: CityConfig):
        self.spec = spec
        self.city = city
        self.stats: dict[tuple[GridFamily, int], GridStats] = {}
        self.user_stats: UserStats | None = None

    def fit(self, train: Dataset) -> "FeatureExtractor":
        if len(train) == 0:
            raise EmptyStatsError("empty training set")
        pairs = self.spec.ladder.pairs()
        codes = _codes_for_pairs(train.cell, pairs)
        self.stats = {
            p: grid_stats_from_codes(codes[p], train.user_id, train.venue_id, p[0], p[1]) for p in pairs
        }
        self.user_stats = UserStats.fit(train.user_id, train.activity)
        return self

    def _check_fitted(self) -> None:
        if self.user_stats is None:
            raise RuntimeError("FeatureExtractor.fit must run before transform")

    def transform(self, data: Dataset) -> np.ndarray:
        self._check_fitted()
        spec = self.spec
        pairs = spec.ladder.pairs()
        n = len(data)
        blocks: list[np.ndarray] = []
        if spec.include_user:
            blocks.append(self.user_stats.encode(data.user_id))
        if spec.include_time:
            blocks.append(encode_timestamps(data.local_time))
        need_codes = spec.include_cells or spec.stats
        codes = _codes_for_pairs(data.cell, pairs) if need_codes and n else {p: np.empty(0, str) for p in pairs}
        looked = {p: self.stats[p].lookup(codes[p]) for p in pairs}
        if spec.include_cells:
            cols = []
            for p in pairs:
                pos, seen = looked[p]
                cols.append(np.where(seen, pos, pos - 0.5).astype(np.float64))
            blocks.append(np.column_stack(cols) if cols else np.empty((n, 0)))
        if spec.include_distance or spec.include_bearing:
            uniq, inv = np.unique(np.asarray(data.cell, dtype=str), return_inverse=True)
            lat, lon = cell_centers(uniq)
            c = self.city.center
            rel = []
            if spec.include_distance:
                rel.append(haversine_many(lat, lon, c.lat, c.lon)[inv.ravel()])
            if spec.include_bearing:
                rel.append(bearing_many(lat, lon, c.lat, c.lon)[inv.ravel()])
            blocks.append(np.column_stack(rel) if n else np.empty((0, len(rel))))
        if spec.stats:
            for p in pairs:
                st = self.stats[p]
                pos, seen = looked[p]
                idx = np.minimum(pos, max(len(st) - 1, 0))
                for name in spec.stats:
                    arr = getattr(st, name)
                    blocks.append(np.where(seen, arr[idx], 0).astype(np.float64)[:, None])
                blocks.append(seen.astype(np.float64)[:, None])
        X = np.hstack(blocks) if blocks else np.empty((n, 0))
        if X.shape != (n, spec.dimension):
            raise DimensionError(f"assembled {X.shape[1]} columns, spec requires {spec.dimension}")
        return X

    def fit_transform(self, train: Dataset) -> np.ndarray:
        return self.fit(train).transform(train)

    def assemble(self, record: CheckIn, record_id: int | str = 0) -> FeatureVector:
        """Single-record assembly, written independently of :meth:`transform`."""
        self._check_fitted()
        spec = self.spec
        pairs = spec.ladder.pairs()
        center = decode(record.cell).center
        vals: list[float] = []
        if spec.include_user:
            vals += list(self.user_stats.encode(np.array([record.user_id]))[0])
        if spec.include_time:
            vals += list(encode_timestamp(record.local_time))
        cells = {p: encode(center, p[0], p[1]).code for p in pairs}
        if spec.include_cells:
            for p in pairs:
                st = self.stats[p]
                pos = int(np.searchsorted(st.cells, cells[p]))
                vals.append(float(pos) if cells[p] in st else pos - 0.5)
        if spec.include_distance or spec.include_bearing:
            dist, brg = relative_location(record.cell, self.city.center)
            if spec.include_distance:
                vals.append(dist)
            if spec.include_bearing:
                vals.append(brg)
        if spec.stats:
            for p in pairs:
                st = self.stats[p]
                hit = st[cells[p]] if cells[p] in st else None
                counts = dict(zip(STAT_NAMES, hit or (0, 0, 0)))
                vals += [float(counts[s]) for s in spec.stats]
                vals.append(1.0 if hit else 0.0)
        v = np.asarray(vals, dtype=np.float64)
        if len(v) != spec.dimension:
            raise DimensionError(f"assembled {len(v)} values, spec requires {spec.dimension}")
        return FeatureVector(v, record.activity, record_id)


def write_feature_csv(path: str | Path, spec: FeatureSpec, X: np.ndarray, y: np.ndarray | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(spec.column_names() + (["activity"] if y is not None else []))
        for i, row in enumerate(X):
            cells = [repr(float(v)) for v in row]
            if y is not None:
                cells.append(ACTIVITIES[int(y[i])])
            w.writerow(cells)


def label_indices(labels: Sequence[str]) -> np.ndarray:
    return np.array([ACTIVITY_INDEX[l] for l in labels], dtype=np.int64)


__all__ = [
    "FeatureExtractor",
    "FeatureSpec",
    "FeatureVector",
    "GridStats",
    "compute_grid_stats",
    "default_ladder",
    "encode_timestamp",
    "encode_timestamps",
    "encode_user",
    "relative_location",
    "write_feature_csv",
]
