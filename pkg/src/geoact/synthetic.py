"""Synthetic check-in cities for running the pipeline without the real dataset.

Recipe, per city (all draws from one seeded generator):

* Venue blocks. Each block gets a dominant activity drawn from ``SHARES`` and
  sits at a bearing uniform in [0, 360) and a distance from the center drawn
  from a gamma law whose mean depends on the activity (``RADIAL_KM``):
  nightlife and offices are central, residences and parks peripheral.
* Venues. Each venue joins a block, takes the block's activity with
  probability ``purity`` (otherwise a draw from ``SHARES``), a concrete
  Foursquare subcategory of that activity, a Gaussian offset of ``spread_km``
  around the block center, and a log-normal popularity weight.
* Users. Log-normal activity level and a category preference mixing the
  global shares with a Dirichlet draw.
* Check-ins. user ~ activity level; category ~ user preference; venue ~
  popularity among venues of that category; day of week and hour from
  activity-specific profiles (``WEEKEND_BOOST``, ``HOUR_PEAKS``); dates span
  April 2012 to September 2013; timezone offset = round(lon / 15) hours.

Records come out as :class:`RawCheckIn` or as the tab-separated format that
``geoact.ingest.parse_checkins`` reads, so the whole ingest path is exercised.
"""

from __future__ import annotations

import gzip
import zlib
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from geoact.activities import ACTIVITIES, N_CLASSES
from geoact.ingest import ActivityTaxonomy, CityConfig, RawCheckIn, load_cities

KM_PER_DEG = 111.195
DEFAULT_CITY = "Mumbai"

SHARES = {
    "Arts & Entertainment": 0.07,
    "College & University": 0.08,
    "Food": 0.20,
    "Nightlife Spot": 0.08,
    "Outdoors & Recreation": 0.08,
    "Professional & Other Places": 0.12,
    "Residence": 0.10,
    "Shop & Service": 0.15,
    "Travel & Transport": 0.12,
}
RADIAL_KM = {
    "Arts & Entertainment": 4.0,
    "College & University": 9.0,
    "Food": 5.0,
    "Nightlife Spot": 3.0,
    "Outdoors & Recreation": 12.0,
    "Professional & Other Places": 3.5,
    "Residence": 14.0,
    "Shop & Service": 6.0,
    "Travel & Transport": 10.0,
}
WEEKEND_BOOST = {
    "Arts & Entertainment": 1.4,
    "College & University": 0.3,
    "Food": 1.0,
    "Nightlife Spot": 1.5,
    "Outdoors & Recreation": 1.8,
    "Professional & Other Places": 0.35,
    "Residence": 1.2,
    "Shop & Service": 1.3,
    "Travel & Transport": 0.9,
}
# (peak hour, spread in hours, weight)
HOUR_PEAKS = {
    "Arts & Entertainment": [(19.0, 2.5, 0.6), (15.0, 3.0, 0.4)],
    "College & University": [(10.0, 2.0, 0.6), (14.0, 2.0, 0.4)],
    "Food": [(12.5, 1.5, 0.45), (19.5, 1.5, 0.4), (8.0, 1.0, 0.15)],
    "Nightlife Spot": [(22.0, 2.0, 0.7), (25.0, 1.5, 0.3)],
    "Outdoors & Recreation": [(10.0, 3.0, 0.5), (17.0, 2.0, 0.5)],
    "Professional & Other Places": [(9.5, 1.5, 0.6), (14.0, 2.0, 0.4)],
    "Residence": [(7.0, 1.5, 0.4), (21.0, 2.5, 0.6)],
    "Shop & Service": [(15.0, 3.0, 1.0)],
    "Travel & Transport": [(8.0, 1.5, 0.5), (18.0, 1.5, 0.5)],
}
START_MONDAY = datetime(2012, 4, 2)
N_WEEKS = 76


@dataclass(frozen=True)
class CityRecipe:
    city: CityConfig
    n_checkins: int = 5000
    n_venues: int = 800
    n_users: int = 400
    n_blocks: int = 120
    purity: float = 0.85
    spread_km: float = 0.25
    max_radius_km: float = 30.0
    seed: int = 0


def city_seed(name: str, seed: int = 0) -> int:
    return (zlib.crc32(name.encode("utf-8")) + 7919 * seed) % (2**32)


def recipe_for(city: str | CityConfig, n_checkins: int = 5000, seed: int = 0, **overrides) -> CityRecipe:
    """Recipe scaled to ``n_checkins`` with venue/user/block counts in fixed ratios."""
    if isinstance(city, str):
        matches = [c for c in load_cities() if c.name == city]
        if not matches:
            raise ValueError(f"no bundled city named {city!r}")
        city = matches[0]
    sizes = {
        "n_venues": max(20, n_checkins // 6),
        "n_users": max(10, n_checkins // 12),
        "n_blocks": max(5, n_checkins // 40),
    }
    sizes.update(overrides)
    return CityRecipe(city, n_checkins, seed=city_seed(city.name, seed), **sizes)


def _shares() -> np.ndarray:
    p = np.array([SHARES[a] for a in ACTIVITIES])
    return p / p.sum()


def _subcategories(tax: ActivityTaxonomy) -> list[list[str]]:
    subs: list[list[str]] = [[] for _ in ACTIVITIES]
    for name, parent in sorted(tax.mapping.items()):
        subs[ACTIVITIES.index(parent)].append(name)
    return subs


def _offset(lat0: float, lon0: float, dx_km: np.ndarray, dy_km: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lat = lat0 + dy_km / KM_PER_DEG
    lon = lon0 + dx_km / (KM_PER_DEG * np.cos(np.radians(lat0)))
    return lat, (lon + 180.0) % 360.0 - 180.0


def _hours(rng: np.random.Generator, cats: np.ndarray) -> np.ndarray:
    out = np.empty(len(cats))
    for c, name in enumerate(ACTIVITIES):
        idx = np.flatnonzero(cats == c)
        if not len(idx):
            continue
        peaks = HOUR_PEAKS[name]
        w = np.array([p[2] for p in peaks])
        which = rng.choice(len(peaks), size=len(idx), p=w / w.sum())
        mu = np.array([p[0] for p in peaks])[which]
        sd = np.array([p[1] for p in peaks])[which]
        out[idx] = (mu + sd * rng.standard_normal(len(idx))) % 24.0
    return out


def _days_of_week(rng: np.random.Generator, cats: np.ndarray) -> np.ndarray:
    out = np.empty(len(cats), dtype=np.int64)
    for c, name in enumerate(ACTIVITIES):
        idx = np.flatnonzero(cats == c)
        w = np.ones(7)
        w[5:] = WEEKEND_BOOST[name]
        out[idx] = rng.choice(7, size=len(idx), p=w / w.sum())
    return out


def generate(recipe: CityRecipe, tax: ActivityTaxonomy | None = None) -> list[RawCheckIn]:
    """Draw one synthetic city's check-ins."""
    tax = tax or ActivityTaxonomy.load()
    rng = np.random.default_rng(recipe.seed)
    shares = _shares()
    subs = _subcategories(tax)
    c = recipe.city.center

    # blocks
    block_cat = rng.choice(N_CLASSES, size=recipe.n_blocks, p=shares)
    scale = np.array([RADIAL_KM[ACTIVITIES[k]] for k in block_cat])
    dist = np.minimum(rng.gamma(2.0, scale / 2.0), recipe.max_radius_km)
    ang = rng.uniform(0, 2 * np.pi, recipe.n_blocks)
    bx, by = dist * np.sin(ang), dist * np.cos(ang)

    # venues
    vb = rng.integers(recipe.n_blocks, size=recipe.n_venues)
    pure = rng.random(recipe.n_venues) < recipe.purity
    venue_cat = np.where(pure, block_cat[vb], rng.choice(N_CLASSES, size=recipe.n_venues, p=shares))
    vx = bx[vb] + recipe.spread_km * rng.standard_normal(recipe.n_venues)
    vy = by[vb] + recipe.spread_km * rng.standard_normal(recipe.n_venues)
    vlat, vlon = _offset(c.lat, c.lon, vx, vy)
    venue_sub = [subs[k][rng.integers(len(subs[k]))] for k in venue_cat]
    popularity = rng.lognormal(0.0, 1.0, recipe.n_venues)

    # users
    level = rng.lognormal(0.0, 1.0, recipe.n_users)
    prefs = 0.3 * shares + 0.7 * rng.dirichlet(np.full(N_CLASSES, 0.4), size=recipe.n_users)
    # a user can only pick categories that have venues
    has_venue = np.bincount(venue_cat, minlength=N_CLASSES) > 0
    prefs = prefs * has_venue
    prefs /= prefs.sum(axis=1, keepdims=True)

    # check-ins
    n = recipe.n_checkins
    users = rng.choice(recipe.n_users, size=n, p=level / level.sum())
    u = rng.random(n)
    cats = np.minimum((u[:, None] > np.cumsum(prefs[users], axis=1)).sum(axis=1), N_CLASSES - 1)
    venues = np.empty(n, dtype=np.int64)
    for k in range(N_CLASSES):
        idx = np.flatnonzero(cats == k)
        if not len(idx):
            continue
        pool = np.flatnonzero(venue_cat == k)
        w = popularity[pool]
        venues[idx] = pool[rng.choice(len(pool), size=len(idx), p=w / w.sum())]
    dow = _days_of_week(rng, cats)
    hours = _hours(rng, cats)
    weeks = rng.integers(N_WEEKS, size=n)
    tz = int(round(c.lon / 15.0)) * 60

    prefix = recipe.city.name[:3].lower()
    out = []
    for i in range(n):
        local = START_MONDAY + timedelta(days=int(weeks[i] * 7 + dow[i]), seconds=int(hours[i] * 3600))
        utc = (local - timedelta(minutes=tz)).replace(tzinfo=timezone.utc)
        v = int(venues[i])
        out.append(
            RawCheckIn(
                f"{prefix}u{users[i]}",
                f"{prefix}v{v}",
                venue_sub[v],
                float(vlat[v]),
                float(vlon[v]),
                utc,
                tz,
            )
        )
    return out


def format_tsv_line(r: RawCheckIn, category_id: str = "") -> str:
    t = r.timestamp.astimezone(timezone.utc).strftime("%a %b %d %H:%M:%S +0000 %Y")
    cid = category_id or format(zlib.crc32(r.venue_category.encode()), "08x")
    return f"{r.user_id}\t{r.venue_id}\t{cid}\t{r.venue_category}\t{r.lat!r}\t{r.lon!r}\t{r.tz_offset_minutes}\t{t}\n"


def write_tsv(records: Sequence[RawCheckIn], path: str | Path) -> None:
    """Write records in the tab-separated check-in format (gzip if ``.gz``)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wt", encoding="utf-8") as fh:
        for r in records:
            fh.write(format_tsv_line(r))


def generate_cities(
    cities: Sequence[CityConfig] | None = None,
    n_checkins: int = 5000,
    seed: int = 0,
    tax: ActivityTaxonomy | None = None,
) -> list[RawCheckIn]:
    """All bundled (or given) cities, concatenated in config order."""
    tax = tax or ActivityTaxonomy.load()
    records: list[RawCheckIn] = []
    for city in cities or load_cities():
        records += generate(recipe_for(city, n_checkins, seed), tax)
    return records


def synthetic_dataset(
    city: str | CityConfig = DEFAULT_CITY,
    n_checkins: int = 5000,
    seed: int = 0,
    test_fraction: float = 0.2,
    split_seed: int = 0,
    **overrides,
):
    """One city's split :class:`Dataset` built through the regular ingest path."""
    from geoact.ingest import build_dataset, split_dataset

    recipe = recipe_for(city, n_checkins, seed, **overrides)
    tax = ActivityTaxonomy.load()
    ds = build_dataset(generate(recipe, tax), [recipe.city], tax)[recipe.city.name]
    return split_dataset(ds, test_fraction, split_seed), recipe.city
