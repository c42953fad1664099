"""Hierarchical spatial grids: Geohash, a half-cell shifted Geohash, and a hex adapter hook.

Cells serialize as ``family:resolution:code``, e.g. ``gh:7:u4pruyd``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from geoact.errors import CellParseError, NoParentError, ResolutionError
from geoact.geodesy import GeoPoint, normalize_lon

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_DECODE = {c: i for i, c in enumerate(BASE32)}
_BASE32_BYTES = np.frombuffer(BASE32.encode("ascii"), dtype=np.uint8)

GEOHASH_MIN_RES = 1
GEOHASH_MAX_RES = 12


class GridFamily(str, enum.Enum):
    GEOHASH = "gh"
    OFFSET_GEOHASH = "ogh"
    EXTERNAL_HEX = "hex"


@dataclass(frozen=True, slots=True)
class Box:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    @property
    def center(self) -> GeoPoint:
        return GeoPoint((self.lat_min + self.lat_max) / 2, (self.lon_min + self.lon_max) / 2)

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max

    def covers(self, other: "Box") -> bool:
        return (
            self.lat_min <= other.lat_min
            and other.lat_max <= self.lat_max
            and self.lon_min <= other.lon_min
            and other.lon_max <= self.lon_max
        )


@dataclass(frozen=True, slots=True, order=True)
class CellId:
    family: GridFamily
    resolution: int
    code: str

    def __str__(self) -> str:
        return f"{self.family.value}:{self.resolution}:{self.code}"

    @classmethod
    def parse(cls, token: str) -> "CellId":
        try:
            fam, res, code = token.split(":", 2)
            cell = cls(GridFamily(fam), int(res), code)
        except ValueError as exc:
            raise CellParseError(f"malformed cell token {token!r}") from exc
        _validate(cell)
        return cell


def cell_size(resolution: int) -> tuple[float, float]:
    """(height, width) in degrees of a Geohash cell at ``resolution``."""
    nbits = 5 * resolution
    lon_bits = (nbits + 1) // 2
    lat_bits = nbits // 2
    return 180.0 / (1 << lat_bits), 360.0 / (1 << lon_bits)


def _check_geohash_res(resolution: int) -> None:
    if not isinstance(resolution, (int, np.integer)) or not (
        GEOHASH_MIN_RES <= resolution <= GEOHASH_MAX_RES
    ):
        raise ResolutionError(
            f"Geohash resolution must be in [{GEOHASH_MIN_RES}, {GEOHASH_MAX_RES}], got {resolution!r}"
        )


def geohash_encode(lat: float, lon: float, precision: int) -> str:
    """Canonical Geohash: interleaved lon/lat bisection, ``>= mid`` goes to the upper half."""
    _check_geohash_res(precision)
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    bit = 0
    ch = 0
    even = True
    while len(chars) < precision:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if lon >= mid:
                ch = (ch << 1) | 1
                lon_lo = mid
            else:
                ch <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if lat >= mid:
                ch = (ch << 1) | 1
                lat_lo = mid
            else:
                ch <<= 1
                lat_hi = mid
        even = not even
        bit += 1
        if bit == 5:
            chars.append(BASE32[ch])
            bit = 0
            ch = 0
    return "".join(chars)


def geohash_decode_box(code: str) -> Box:
    if not code or len(code) > GEOHASH_MAX_RES:
        raise CellParseError(f"Geohash code length must be 1..{GEOHASH_MAX_RES}, got {code!r}")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    even = True
    for c in code:
        try:
            val = _DECODE[c]
        except KeyError:
            raise CellParseError(f"illegal Geohash character {c!r} in {code!r}") from None
        for shift in range(4, -1, -1):
            b = (val >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2
                if b:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if b:
                    lat_lo = mid
                else:
                    lat_hi = mid
            even = not even
    return Box(lat_lo, lat_hi, lon_lo, lon_hi)


def geohash_encode_many(lat: np.ndarray, lon: np.ndarray, precision: int) -> np.ndarray:
    """Vectorized :func:`geohash_encode`. Returns an array of ``str`` codes.

    Runs the same bisection as the scalar version, one bit per array pass, so
    results are bit-identical including on boundaries.
    """
    _check_geohash_res(precision)
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    n = lat.shape[0]
    lat_lo = np.full(n, -90.0)
    lat_hi = np.full(n, 90.0)
    lon_lo = np.full(n, -180.0)
    lon_hi = np.full(n, 180.0)
    out = np.empty((n, precision), dtype=np.uint8)
    even = True
    for k in range(precision):
        ch = np.zeros(n, dtype=np.uint8)
        for _ in range(5):
            if even:
                mid = (lon_lo + lon_hi) / 2
                up = lon >= mid
                lon_lo = np.where(up, mid, lon_lo)
                lon_hi = np.where(up, lon_hi, mid)
            else:
                mid = (lat_lo + lat_hi) / 2
                up = lat >= mid
                lat_lo = np.where(up, mid, lat_lo)
                lat_hi = np.where(up, lat_hi, mid)
            ch = (ch << 1) | up.astype(np.uint8)
            even = not even
        out[:, k] = _BASE32_BYTES[ch]
    return out.view(f"S{precision}").ravel().astype(str)


def _offset_point(lat: float, lon: float, resolution: int) -> tuple[float, float]:
    h, w = cell_size(resolution)
    return min(lat + h / 2, 90.0), normalize_lon(lon + w / 2)


class HexProvider(Protocol):
    """What an external hexagonal grid (for instance H3) must supply."""

    min_resolution: int
    max_resolution: int

    def encode(self, lat: float, lon: float, resolution: int) -> str: ...

    def boundary(self, code: str) -> list[tuple[float, float]]:
        """Polygon vertices as (lat, lon)."""
        ...

    def parent(self, code: str, resolution: int) -> str: ...


_hex_provider: HexProvider | None = None


def register_hex_provider(provider: HexProvider | None) -> None:
    global _hex_provider
    _hex_provider = provider


def _require_hex() -> HexProvider:
    if _hex_provider is None:
        raise ResolutionError("no external hex provider registered for the 'hex' family")
    return _hex_provider


def _check_res(family: GridFamily, resolution: int) -> None:
    if family is GridFamily.EXTERNAL_HEX:
        p = _require_hex()
        if not p.min_resolution <= resolution <= p.max_resolution:
            raise ResolutionError(f"hex resolution {resolution} unsupported by provider")
    else:
        _check_geohash_res(resolution)


def _validate(cell: CellId) -> None:
    _check_res(cell.family, cell.resolution)
    if cell.family is not GridFamily.EXTERNAL_HEX:
        if len(cell.code) != cell.resolution:
            raise CellParseError(f"code {cell.code!r} does not match resolution {cell.resolution}")
        bad = [c for c in cell.code if c not in _DECODE]
        if bad:
            raise CellParseError(f"illegal Geohash character {bad[0]!r} in {cell.code!r}")


def encode(point: GeoPoint, family: GridFamily, resolution: int) -> CellId:
    family = GridFamily(family)
    _check_res(family, resolution)
    if family is GridFamily.GEOHASH:
        return CellId(family, resolution, geohash_encode(point.lat, point.lon, resolution))
    if family is GridFamily.OFFSET_GEOHASH:
        lat, lon = _offset_point(point.lat, point.lon, resolution)
        return CellId(family, resolution, geohash_encode(lat, lon, resolution))
    return CellId(family, resolution, _require_hex().encode(point.lat, point.lon, resolution))


def encode_many(lat: np.ndarray, lon: np.ndarray, family: GridFamily, resolution: int) -> np.ndarray:
    """Codes (not full :class:`CellId` objects) for many points at once."""
    family = GridFamily(family)
    _check_res(family, resolution)
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if family is GridFamily.GEOHASH:
        return geohash_encode_many(lat, lon, resolution)
    if family is GridFamily.OFFSET_GEOHASH:
        h, w = cell_size(resolution)
        shifted_lon = (lon + w / 2 + 180.0) % 360.0 - 180.0
        shifted_lon = np.where(shifted_lon >= 180.0, -180.0, shifted_lon)
        return geohash_encode_many(np.minimum(lat + h / 2, 90.0), shifted_lon, resolution)
    p = _require_hex()
    return np.array([p.encode(a, b, resolution) for a, b in zip(lat, lon)], dtype=str)


@dataclass(frozen=True, slots=True)
class Decoded:
    box: Box
    center: GeoPoint


def decode(cell: CellId | str) -> Decoded:
    """Bounding box and center of a cell.

    A bare string is read as a Geohash code. Offset cells report their box in
    original (unshifted) coordinates, so it may straddle the antimeridian with
    ``lon_min < -180``.
    """
    if isinstance(cell, str):
        box = geohash_decode_box(cell)
        return Decoded(box, box.center)
    _validate(cell)
    if cell.family is GridFamily.GEOHASH:
        box = geohash_decode_box(cell.code)
    elif cell.family is GridFamily.OFFSET_GEOHASH:
        g = geohash_decode_box(cell.code)
        h, w = cell_size(cell.resolution)
        box = Box(g.lat_min - h / 2, g.lat_max - h / 2, g.lon_min - w / 2, g.lon_max - w / 2)
    else:
        verts = _require_hex().boundary(cell.code)
        lats = [v[0] for v in verts]
        lons = [v[1] for v in verts]
        box = Box(min(lats), max(lats), min(lons), max(lons))
    return Decoded(box, box.center)


def parent(cell: CellId) -> CellId:
    _validate(cell)
    if cell.resolution <= 1:
        raise NoParentError(f"{cell} has no parent")
    if cell.family is GridFamily.GEOHASH:
        return CellId(cell.family, cell.resolution - 1, cell.code[:-1])
    if cell.family is GridFamily.OFFSET_GEOHASH:
        # each resolution has its own half-cell shift, so offset cells do not nest:
        # the parent is the coarser offset cell holding the child's center.
        c = decode(cell).center
        return encode(c, cell.family, cell.resolution - 1)
    p = _require_hex()
    return CellId(cell.family, cell.resolution - 1, p.parent(cell.code, cell.resolution - 1))


@dataclass(frozen=True)
class ResolutionLadder:
    """Which (family, resolution) pairs to extract features at."""

    resolutions: dict[GridFamily, tuple[int, ...]] = field(
        default_factory=lambda: {GridFamily.GEOHASH: tuple(range(4, 11))}
    )

    def __post_init__(self) -> None:
        if not self.resolutions:
            raise ValueError("resolution ladder must list at least one family")
        fixed = {}
        for fam, res in self.resolutions.items():
            res = tuple(int(r) for r in res)
            if not res:
                raise ValueError(f"empty resolution list for {fam}")
            if any(b <= a for a, b in zip(res, res[1:])):
                raise ValueError(f"resolutions must be strictly increasing, got {res}")
            fixed[GridFamily(fam)] = res
        object.__setattr__(self, "resolutions", fixed)

    @classmethod
    def build(cls, families: Iterable[GridFamily | str], resolutions: Sequence[int]) -> "ResolutionLadder":
        return cls({GridFamily(f): tuple(resolutions) for f in families})

    def pairs(self) -> list[tuple[GridFamily, int]]:
        return [(fam, r) for fam, res in self.resolutions.items() for r in res]

    def to_dict(self) -> dict[str, list[int]]:
        return {fam.value: list(res) for fam, res in self.resolutions.items()}

    @classmethod
    def from_dict(cls, d: dict[str, Sequence[int]]) -> "ResolutionLadder":
        return cls({GridFamily(k): tuple(v) for k, v in d.items()})


def cells_for_point(point: GeoPoint, ladder: ResolutionLadder) -> list[CellId]:
    return [encode(point, fam, r) for fam, r in ladder.pairs()]
