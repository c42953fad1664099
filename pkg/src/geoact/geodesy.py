"""Spherical-earth distance and bearing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from geoact.errors import DegenerateBearingError, InvalidInputError

EARTH_RADIUS_KM = 6371.0


def normalize_lon(lon: float) -> float:
    """Wrap a longitude into [-180, 180)."""
    wrapped = (lon + 180.0) % 360.0 - 180.0
    # float modulo can land exactly on +180 for tiny negative inputs
    return -180.0 if wrapped >= 180.0 else wrapped


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InvalidInputError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise InvalidInputError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))


@dataclass(frozen=True, slots=True)
class EarthModel:
    radius_km: float = EARTH_RADIUS_KM

    def __post_init__(self) -> None:
        if not (math.isfinite(self.radius_km) and self.radius_km > 0):
            raise InvalidInputError(f"earth radius must be positive, got {self.radius_km}")


DEFAULT_EARTH = EarthModel()


def haversine_distance(a: GeoPoint, b: GeoPoint, earth: EarthModel = DEFAULT_EARTH) -> float:
    """Great-circle distance in km between ``a`` and ``b``.

    The haversine term is clipped to [0, 1] so rounding can never push the
    square roots into NaN territory near antipodes.
    """
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    h = min(1.0, max(0.0, h))
    c = 2.0 * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))
    return earth.radius_km * c


def initial_bearing(a: GeoPoint, b: GeoPoint) -> float:
    """Initial bearing in degrees [0, 360) when heading from ``a`` towards ``b``."""
    if a == b:
        raise DegenerateBearingError(f"bearing undefined between coincident points {a}")
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dlam = math.radians(b.lon - a.lon)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    theta = math.degrees(math.atan2(y, x)) % 360.0
    return 0.0 if theta >= 360.0 else theta


def bearing_or_zero(a: GeoPoint, b: GeoPoint) -> float:
    """Like :func:`initial_bearing` but maps the coincident case to 0."""
    try:
        return initial_bearing(a, b)
    except DegenerateBearingError:
        return 0.0


def haversine_many(
    lat1: np.ndarray, lon1: np.ndarray, lat2, lon2, radius_km: float = EARTH_RADIUS_KM
) -> np.ndarray:
    """Vectorized :func:`haversine_distance` over degree arrays (broadcasting)."""
    lat1, lon1, lat2, lon2 = (np.asarray(v, dtype=np.float64) for v in (lat1, lon1, lat2, lon2))
    if not all(np.isfinite(v).all() for v in (lat1, lon1, lat2, lon2)):
        raise InvalidInputError("non-finite coordinate in input arrays")
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dlam = np.radians(lon2 - lon1)
    h = np.sin((phi2 - phi1) / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2) ** 2
    h = np.clip(h, 0.0, 1.0)
    return radius_km * 2.0 * np.arctan2(np.sqrt(h), np.sqrt(1.0 - h))


def bearing_many(lat1: np.ndarray, lon1: np.ndarray, lat2, lon2) -> np.ndarray:
    """Vectorized initial bearing; coincident pairs yield 0."""
    lat1, lon1, lat2, lon2 = (np.asarray(v, dtype=np.float64) for v in (lat1, lon1, lat2, lon2))
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dlam = np.radians(lon2 - lon1)
    y = np.sin(dlam) * np.cos(phi2)
    x = np.cos(phi1) * np.sin(phi2) - np.sin(phi1) * np.cos(phi2) * np.cos(dlam)
    theta = np.degrees(np.arctan2(y, x)) % 360.0
    theta = np.where(theta >= 360.0, 0.0, theta)
    same = (lat1 == lat2) & (((lon1 - lon2) % 360.0) == 0.0)
    return np.where(same, 0.0, theta)
