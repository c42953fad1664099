import gzip
import json
import logging
from datetime import datetime, timezone

import numpy as np
import pytest

from geoact.activities import ACTIVITIES, ACTIVITY_INDEX, N_CLASSES
from geoact.errors import EmptyDatasetError, IngestQualityError, TaxonomyError
from geoact.geodesy import GeoPoint
from geoact.grid import geohash_encode
from geoact.ingest import (
    ActivityTaxonomy,
    CategoryMapper,
    CityConfig,
    Dataset,
    RawCheckIn,
    assign_city,
    build_dataset,
    load_cities,
    map_category,
    parse_checkins,
    parse_checkins_report,
    read_dataset,
    split_dataset,
    stratified_assignment,
    table_summary,
    write_dataset,
)

TOKYO = CityConfig("Tokyo", GeoPoint(35.6762, 139.6503), 30.0)
OSAKA = CityConfig("Osaka", GeoPoint(34.6937, 135.5023), 30.0)

LINE = "u1\tv1\t4bf58dd8d48988d1d1941735\tRamen / Noodle House\t35.68\t139.65\t540\tTue Apr 03 18:00:09 +0000 2012\n"


def make_line(user="u1", venue="v1", cat="Ramen / Noodle House", lat=35.68, lon=139.65, tz=540,
              when="Tue Apr 03 18:00:09 +0000 2012"):
    return f"{user}\t{venue}\tcid\t{cat}\t{lat}\t{lon}\t{tz}\t{when}\n"


def raw(user="u", venue="v", cat="Ramen / Noodle House", lat=35.6762, lon=139.6503, tz=540,
        ts=datetime(2012, 4, 3, 18, 0, 9, tzinfo=timezone.utc)):
    return RawCheckIn(user, venue, cat, lat, lon, ts, tz)


@pytest.fixture(scope="module")
def tax():
    return ActivityTaxonomy.load()


class TestParse:
    def test_three_lines(self):
        data = (make_line("a") + make_line("b") + make_line("c")).encode()
        recs = parse_checkins(data)
        assert [r.user_id for r in recs] == ["a", "b", "c"]
        r = recs[0]
        assert r.timestamp == datetime(2012, 4, 3, 18, 0, 9, tzinfo=timezone.utc)
        assert r.tz_offset_minutes == 540
        assert r.venue_category == "Ramen / Noodle House"

    def test_gzip_input(self, tmp_path):
        p = tmp_path / "in.tsv.gz"
        with gzip.open(p, "wt", encoding="utf-8") as fh:
            fh.write(LINE * 4)
        assert len(parse_checkins(p)) == 4

    def test_iso_timestamps_accepted(self):
        (r,) = parse_checkins(make_line(when="2012-04-03T18:00:09Z").encode())
        assert r.timestamp == datetime(2012, 4, 3, 18, 0, 9, tzinfo=timezone.utc)

    def test_lat_95_is_malformed(self):
        lines = make_line(lat=95) + make_line() * 200
        rep = parse_checkins_report(lines.encode())
        assert rep.malformed == 1
        assert len(rep.records) == 200
        assert rep.malformed_examples[0][0] == 1

    def test_more_than_one_percent_malformed_fails(self):
        lines = make_line(lat=95) * 2 + make_line() * 98
        with pytest.raises(IngestQualityError):
            parse_checkins(lines.encode())

    def test_exactly_one_percent_is_tolerated(self):
        lines = make_line(lat=95) + make_line() * 99
        assert len(parse_checkins(lines.encode())) == 99

    @pytest.mark.parametrize("bad", ["", "\n\n"])
    def test_empty_input(self, bad):
        with pytest.raises(EmptyDatasetError):
            parse_checkins(bad.encode())

    @pytest.mark.parametrize(
        "line",
        [
            "too\tfew\tcolumns\n",
            make_line(lon=200),
            make_line(lat="nan"),
            make_line(when="yesterday"),
            make_line(user=""),
            make_line(tz="x"),
        ],
    )
    def test_malformed_variants(self, line):
        rep = parse_checkins_report((line + make_line() * 150).encode())
        assert rep.malformed == 1


class TestCities:
    def test_bundled_cities(self):
        names = [c.name for c in load_cities()]
        assert names == ["Los Angeles", "Tokyo", "Mumbai", "Sydney", "Paris", "Milan"]
        assert all(c.assignment_radius_km == 35 for c in load_cities())

    def test_one_km_from_tokyo(self):
        # 1 km north: 1 / 111.195 degrees of latitude
        r = raw(lat=35.6762 + 1 / 111.195)
        assert assign_city(r, [OSAKA, TOKYO]) == "Tokyo"

    def test_far_from_everything(self):
        assert assign_city(raw(lat=0.0, lon=0.0), [TOKYO, OSAKA]) is None

    def test_equidistant_goes_to_first(self):
        a = CityConfig("A", GeoPoint(0.0, -1.0), 500)
        b = CityConfig("B", GeoPoint(0.0, 1.0), 500)
        r = raw(lat=0.0, lon=0.0)
        assert assign_city(r, [a, b]) == "A"
        assert assign_city(r, [b, a]) == "B"

    def test_nearest_wins_over_order(self):
        a = CityConfig("A", GeoPoint(0.0, -1.0), 500)
        b = CityConfig("B", GeoPoint(0.0, 0.5), 500)
        assert assign_city(raw(lat=0.0, lon=0.1), [a, b]) == "B"

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            CityConfig("X", GeoPoint(0, 0), 0.0)


class TestTaxonomy:
    @pytest.mark.parametrize(
        "raw_cat,parent",
        [("Ramen / Noodle House", "Food"), ("Home (private)", "Residence")],
    )
    def test_fixture_mappings(self, tax, raw_cat, parent):
        assert map_category(raw_cat, tax) == parent

    def test_nine_parents(self, tax):
        assert set(tax.mapping.values()) == set(ACTIVITIES)

    def test_unknown_dropped_and_counted(self, tax):
        m = CategoryMapper(tax, "drop")
        assert m("???") is None
        assert m("???") is None
        assert m.dropped == 2
        assert m.unknown == {"???": 2}

    def test_unknown_with_error_policy(self, tax):
        with pytest.raises(TaxonomyError):
            map_category("???", tax, "error")

    def test_missing_file(self, tmp_path):
        with pytest.raises(TaxonomyError):
            ActivityTaxonomy.load(tmp_path / "absent.tsv")

    def test_bad_parent(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("Diner\tEating\n")
        with pytest.raises(TaxonomyError):
            ActivityTaxonomy.load(p)


class TestBuildDataset:
    def test_single_record(self, tax):
        ds = build_dataset([raw()], [TOKYO], tax)["Tokyo"]
        assert ds.summary == {"city": "Tokyo", "checkins": 1, "venues": 1, "users": 1}
        assert ds.activity.tolist() == [ACTIVITY_INDEX["Food"]]

    def test_same_venue_twice(self, tax):
        ds = build_dataset([raw(user="a"), raw(user="b")], [TOKYO], tax)["Tokyo"]
        assert (ds.summary["venues"], ds.summary["checkins"], ds.summary["users"]) == (1, 2, 2)

    def test_local_time_applies_offset(self, tax):
        ds = build_dataset([raw(tz=540)], [TOKYO], tax)["Tokyo"]
        assert ds.local_time[0] == np.datetime64("2012-04-04T03:00:09")

    def test_cell_is_anonymized_geohash(self, tax):
        ds = build_dataset([raw()], [TOKYO], tax, anon_resolution=8)["Tokyo"]
        assert ds.cell[0] == geohash_encode(35.6762, 139.6503, 8)
        assert ds.anon_resolution == 8

    def test_empty_city_warns(self, tax, caplog):
        with caplog.at_level(logging.WARNING):
            out = build_dataset([raw()], [TOKYO, OSAKA], tax)
        assert len(out["Osaka"]) == 0
        assert "Osaka" in caplog.text

    def test_unmapped_and_out_of_city_filtered(self, tax):
        recs = [raw(), raw(cat="???"), raw(lat=0.0, lon=0.0)]
        out = build_dataset(recs, [TOKYO], tax)
        assert len(out["Tokyo"]) == 1

    def test_summary_matches_recount(self, tax):
        rng = np.random.default_rng(3)
        recs = [
            raw(user=f"u{rng.integers(20)}", venue=f"v{rng.integers(50)}",
                lat=35.6762 + rng.normal(0, 0.05), lon=139.6503 + rng.normal(0, 0.05))
            for _ in range(300)
        ]
        ds = build_dataset(recs, [TOKYO], tax)["Tokyo"]
        kept = [r for r in recs if assign_city(r, [TOKYO]) == "Tokyo"]
        assert ds.summary["checkins"] == len(kept)
        assert ds.summary["venues"] == len({r.venue_id for r in kept})
        assert ds.summary["users"] == len({r.user_id for r in kept})
        total = table_summary([ds])["total"]
        assert total["checkins"] == len(kept)


def _labels_dataset(labels):
    n = len(labels)
    return Dataset(
        "X",
        [f"u{i}" for i in range(n)],
        [f"v{i}" for i in range(n)],
        ["s" * 10] * n,
        np.full(n, np.datetime64("2012-01-01T00:00:00")),
        labels,
        np.zeros(n, dtype=bool),
    )


class TestSplit:
    def test_hundred_records(self):
        labels = np.arange(100) % N_CLASSES
        d = split_dataset(_labels_dataset(labels), 0.2, seed=7)
        assert d.is_test.sum() == 20
        per_class = np.bincount(labels[d.is_test], minlength=N_CLASSES)
        assert (per_class >= 1).all()

    def test_deterministic(self):
        labels = np.arange(200) % N_CLASSES
        a = split_dataset(_labels_dataset(labels), 0.2, 11)
        b = split_dataset(_labels_dataset(labels), 0.2, 11)
        c = split_dataset(_labels_dataset(labels), 0.2, 12)
        assert np.array_equal(a.is_test, b.is_test)
        assert not np.array_equal(a.is_test, c.is_test)

    def test_mumbai_sized_split(self):
        # per-class test share within one record; total = round(0.2 * 25248) = 5050
        rng = np.random.default_rng(0)
        labels = rng.choice(N_CLASSES, size=25248, p=np.linspace(1, 3, N_CLASSES) / np.linspace(1, 3, N_CLASSES).sum())
        mask = stratified_assignment(labels, 0.2, seed=5)
        assert abs(int(mask.sum()) - 5050) <= 9
        sizes = np.bincount(labels, minlength=N_CLASSES)
        taken = np.bincount(labels[mask], minlength=N_CLASSES)
        assert np.all(np.abs(taken - 0.2 * sizes) <= 1)

    def test_singleton_class_stays_in_train(self, caplog):
        labels = np.array([0] * 10 + [1])
        with caplog.at_level(logging.WARNING):
            mask = stratified_assignment(labels, 0.2, 0)
        assert not mask[-1]
        assert "<2 records" in caplog.text

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, fraction):
        with pytest.raises(ValueError):
            stratified_assignment(np.zeros(10), fraction, 0)


class TestSerialization:
    def test_roundtrip_and_privacy(self, tax, tmp_path):
        recs = [raw(user=f"u{i}", venue=f"v{i % 3}", lat=35.6762 + i * 1e-3) for i in range(12)]
        ds = split_dataset(build_dataset(recs, [TOKYO], tax)["Tokyo"], 0.25, 1)
        p = tmp_path / "tokyo.dataset.jsonl"
        write_dataset(ds, p, config_hash="abc")
        back = read_dataset(p)
        assert back.summary == ds.summary
        assert np.array_equal(back.is_test, ds.is_test)
        assert np.array_equal(back.local_time, ds.local_time)
        assert back.cell.tolist() == ds.cell.tolist()
        header = json.loads(p.read_text().splitlines()[0])
        assert header["config_hash"] == "abc"
        text = p.read_text()
        # no raw coordinates survive serialization
        assert "35.67" not in text and "139.65" not in text

    def test_records_carry_cells_not_coordinates(self, tax):
        ds = build_dataset([raw()], [TOKYO], tax)["Tokyo"]
        (rec,) = list(ds.records())
        assert not hasattr(rec, "lat") and not hasattr(rec, "lon")
        assert rec.activity == "Food"
        assert str(rec.cell).startswith("gh:10:")
