import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoact.errors import DegenerateBearingError, InvalidInputError
from geoact.geodesy import (
    EarthModel,
    GeoPoint,
    bearing_many,
    haversine_distance,
    haversine_many,
    initial_bearing,
)

# Frozen from a 50-digit mpmath oracle using the chord formula on unit vectors
# (d = 2R asin(|p - q| / 2)) and a tangent-plane bearing; see tests/oracles.py.
PARIS_SHORT_KM = 1.1570046974814777
BEARING_10_10_TO_9_5_10_7 = 125.87317417208228

lat_st = st.floats(-90, 90, allow_nan=False)
lon_st = st.floats(-180, 180, allow_nan=False, exclude_max=True)
point_st = st.builds(GeoPoint, lat_st, lon_st)


class TestGeoPoint:
    def test_lon_normalized(self):
        assert GeoPoint(0, 180).lon == -180
        assert GeoPoint(0, 190).lon == pytest.approx(-170)
        assert GeoPoint(0, -180).lon == -180

    @pytest.mark.parametrize("lat,lon", [(95, 0), (-90.1, 0), (math.nan, 0), (0, math.inf)])
    def test_invalid(self, lat, lon):
        with pytest.raises(InvalidInputError):
            GeoPoint(lat, lon)

    def test_earth_radius_positive(self):
        with pytest.raises(InvalidInputError):
            EarthModel(0.0)


class TestHaversine:
    def test_identity(self):
        p = GeoPoint(35.6762, 139.6503)
        assert haversine_distance(p, p) == 0.0

    def test_antipodal_equator(self):
        d = haversine_distance(GeoPoint(0, 0), GeoPoint(0, 180))
        assert d == pytest.approx(math.pi * 6371.0, rel=1e-12)
        assert d == pytest.approx(20015.087, abs=1e-3)

    def test_paris_oracle(self):
        d = haversine_distance(GeoPoint(48.8566, 2.3522), GeoPoint(48.8606, 2.3376))
        assert d == pytest.approx(PARIS_SHORT_KM, rel=1e-9)

    def test_radius_scales(self):
        a, b = GeoPoint(10, 10), GeoPoint(-20, 40)
        assert haversine_distance(a, b, EarthModel(1.0)) * 6371.0 == pytest.approx(haversine_distance(a, b))

    @settings(max_examples=300)
    @given(point_st, point_st)
    def test_symmetry_nonnegative(self, a, b):
        d = haversine_distance(a, b)
        assert d == haversine_distance(b, a)
        assert d >= 0.0

    @settings(max_examples=300)
    @given(point_st, point_st, point_st)
    def test_triangle(self, a, b, c):
        assert haversine_distance(a, c) <= haversine_distance(a, b) + haversine_distance(b, c) + 1e-9

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(1)
        lat = rng.uniform(-90, 90, (2, 200))
        lon = rng.uniform(-180, 180, (2, 200))
        vec = haversine_many(lat[0], lon[0], lat[1], lon[1])
        ref = [haversine_distance(GeoPoint(lat[0, i], lon[0, i]), GeoPoint(lat[1, i], lon[1, i])) for i in range(200)]
        np.testing.assert_allclose(vec, ref, rtol=1e-12)

    def test_vectorized_rejects_nan(self):
        with pytest.raises(InvalidInputError):
            haversine_many(np.array([np.nan]), np.array([0.0]), 0.0, 0.0)


class TestBearing:
    def test_north(self):
        assert initial_bearing(GeoPoint(0, 0), GeoPoint(1, 0)) == 0.0

    def test_east(self):
        assert initial_bearing(GeoPoint(0, 0), GeoPoint(0, 1)) == pytest.approx(90.0, abs=1e-12)

    def test_oracle(self):
        b = initial_bearing(GeoPoint(10, 10), GeoPoint(9.5, 10.7))
        assert b == pytest.approx(BEARING_10_10_TO_9_5_10_7, abs=1e-9)

    def test_degenerate(self):
        with pytest.raises(DegenerateBearingError):
            initial_bearing(GeoPoint(1, 2), GeoPoint(1, 2))

    @settings(max_examples=300)
    @given(point_st, point_st)
    def test_range(self, a, b):
        if a != b:
            assert 0.0 <= initial_bearing(a, b) < 360.0

    @settings(max_examples=300)
    @given(point_st, st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
    def test_reversal_short_segments(self, a, dlat, dlon):
        if abs(a.lat) > 80:
            return
        b = GeoPoint(a.lat + dlat, a.lon + dlon)
        if not 1e-9 < haversine_distance(a, b) <= 10:
            return  # sub-micrometre offsets underflow in radians and read as coincident
        fwd = initial_bearing(a, b)
        back = (initial_bearing(b, a) + 180.0) % 360.0
        diff = abs(fwd - back)
        assert min(diff, 360 - diff) < 0.5

    def test_vectorized(self):
        rng = np.random.default_rng(2)
        lat = rng.uniform(-80, 80, (2, 100))
        lon = rng.uniform(-180, 180, (2, 100))
        vec = bearing_many(lat[0], lon[0], lat[1], lon[1])
        ref = [initial_bearing(GeoPoint(lat[0, i], lon[0, i]), GeoPoint(lat[1, i], lon[1, i])) for i in range(100)]
        np.testing.assert_allclose(vec, ref, atol=1e-9)
        assert bearing_many(np.array([3.0]), np.array([4.0]), 3.0, 4.0)[0] == 0.0
