import json
import math
import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cis_cases import run_case, same_outcome
from cis_oracles import (
    DAY,
    HOUR,
    brute_force_recommend,
    destination,
    gc_distance,
    random_recommend_case,
    stepwise_mean,
    trip_oracle,
)
from cisflow.cis.data import (
    CsvFormatError,
    ingest_prices,
    ingest_stations,
    load_prices_csv,
    load_stations_csv,
    parse_iso_utc,
    prices_from_store,
    stations_from_store,
    write_prices_csv,
    write_stations_csv,
)
from cisflow.cis.filters import TripState, first_appearances, fuel_below_threshold, trip_update
from cisflow.cis.geo import haversine_km
from cisflow.cis.model import (
    DeadLetter,
    GasStation,
    PriceEvent,
    VehicleReading,
    parse_fuel_level,
    parse_vehicle_reading,
)
from cisflow.cis.prices import (
    HttpPriceSource,
    NoHistory,
    PriceCache,
    PriceHistory,
    StaticPriceSource,
    StationNotFound,
    historical_average,
)
from cisflow.cis.recommend import (
    NoRecommendation,
    Recommendation,
    RecommendContext,
    RecommenderConfig,
    fill_cost,
    recommend_station,
)
from cisflow.cis.rtree import DuplicateStationId, StationIndex, linear_scan, nearby_stations

LISTING_DOC = {
    "altitude": 112.0,
    "latitude": 52.52,
    "longitude": 13.405,
    "readings": {"FUEL_LEVEL": "43.5", "ENGINE_RPM": "2100"},
    "timestamp": 1_500_000_000_000,
    "vehicleid": "WVW-0001",
}


def doc_bytes(**changes):
    doc = dict(LISTING_DOC)
    doc.update(changes)
    return json.dumps(doc).encode()


# -- decoding ---------------------------------------------------------------

def test_listing_document_parses():
    r = parse_vehicle_reading(doc_bytes(), "m1")
    assert isinstance(r, VehicleReading)
    assert r.fuel_level == 43.5
    assert (r.vehicle_id, r.timestamp, r.message_id) == ("WVW-0001", 1_500_000_000_000, "m1")
    assert r.readings["ENGINE_RPM"] == "2100"


def test_missing_fuel_level_is_tolerated():
    r = parse_vehicle_reading(doc_bytes(readings={"ENGINE_RPM": "900"}))
    assert isinstance(r, VehicleReading) and r.fuel_level is None
    r = parse_vehicle_reading(json.dumps({k: v for k, v in LISTING_DOC.items()
                                          if k not in ("readings", "altitude")}))
    assert isinstance(r, VehicleReading) and r.readings == {} and r.altitude is None


@pytest.mark.parametrize("change, reason", [
    ({"latitude": 91}, "latitude"),
    ({"longitude": -180.5}, "longitude"),
    ({"readings": {"FUEL_LEVEL": "120"}}, "FUEL_LEVEL"),
    ({"vehicleid": ""}, "vehicleid"),
    ({"timestamp": "yesterday"}, "timestamp"),
    ({"latitude": "52.5"}, "latitude"),
])
def test_invalid_documents_become_dead_letters(change, reason):
    dl = parse_vehicle_reading(doc_bytes(**change), "m9")
    assert isinstance(dl, DeadLetter)
    assert reason in dl.reason and dl.message_id == "m9"


@pytest.mark.parametrize("payload", [b"not json", b"[1, 2]", b"\xff\xfe", b""])
def test_garbage_never_raises(payload):
    assert isinstance(parse_vehicle_reading(payload), DeadLetter)


@pytest.mark.parametrize("raw, value", [
    ("43.5", 43.5), ("43.5%", 43.5), (" 7 % ", 7.0), ("0", 0.0), ("100", 100.0),
    ("43,5", None), ("", None), ("n/a", None), ("nan", None), (12, 12.0),
])
def test_fuel_level_text(raw, value):
    assert parse_fuel_level(raw) == value


@given(st.text(max_size=12))
def test_fuel_parser_total(text):
    v = parse_fuel_level(text)
    assert v is None or math.isfinite(v)


@given(st.floats(-90, 90), st.floats(-180, 180), st.floats(0, 100),
       st.integers(0, 2**53), st.text(min_size=1, max_size=8))
def test_decode_roundtrip(lat, lon, fuel, ts, vid):
    r = VehicleReading(vid, ts, lat, lon, 10.0, {"FUEL_LEVEL": repr(fuel)})
    back = parse_vehicle_reading(r.to_json())
    assert back == r and back.fuel_level == fuel


# -- fuel filter ------------------------------------------------------------

def reading(fuel=None, vid="v", ts=0, lat=0.0, lon=0.0, mid=None):
    readings = {} if fuel is None else {"FUEL_LEVEL": str(fuel)}
    return VehicleReading(vid, ts, lat, lon, 0.0, readings, mid)


def test_fuel_threshold_is_strict():
    assert fuel_below_threshold(reading(49.9))
    assert not fuel_below_threshold(reading(50.0))
    assert not fuel_below_threshold(reading(None))
    assert not fuel_below_threshold(reading("unknown"))


# -- trip filter ------------------------------------------------------------

GAP = 30 * 60_000


def test_one_second_apart_only_first_passes():
    a, b = reading(10, ts=0, mid="a"), reading(10, ts=1000, mid="b")
    assert [r.message_id for r in first_appearances([a, b], GAP)] == ["a"]


def test_new_trip_after_gap():
    a, b = reading(10, ts=0, mid="a"), reading(10, ts=31 * 60_000, mid="b")
    got = [r.message_id for r in first_appearances([a, b], GAP)]
    want = trip_oracle([("v", 0, "a"), ("v", 31 * 60_000, "b")], GAP)
    assert got == want == ["a", "b"]


def test_trip_state_never_moves_back():
    st1 = trip_update([reading(10, ts=5000)], None, GAP)
    st2 = trip_update([reading(10, ts=1000)], st1, GAP)
    assert st2.last_seen == 5000 and st2.passed == ()
    assert trip_update([], st2, GAP) == TripState(5000, ())


@settings(max_examples=60)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(0, 4 * GAP)), max_size=25),
       st.integers(1, 4))
def test_trip_rule_matches_oracle_across_batches(events, n_batches):
    rows = [(vid, ts, f"m{i:03d}") for i, (vid, ts) in enumerate(events)]
    rows.sort(key=lambda r: (r[1], r[2]))
    # split the time-ordered readings into consecutive batches
    cuts = sorted(random.Random(len(rows)).sample(range(len(rows) + 1), min(n_batches - 1, len(rows) + 1)))
    states = {}
    got = []
    prev = 0
    for c in cuts + [len(rows)]:
        batch = [reading(10, vid=v, ts=t, mid=m) for v, t, m in rows[prev:c]]
        got += [r.message_id for r in first_appearances(batch, GAP, states)]
        prev = c
    assert sorted(got) == sorted(trip_oracle(rows, GAP))


# -- distance ---------------------------------------------------------------

def test_haversine_known_values():
    assert haversine_km(52.0, 13.0, 52.0, 13.0) == 0.0
    assert haversine_km(0, 0, 0, 0.1) == pytest.approx(math.pi * 6371 * 0.1 / 180, abs=1e-3)
    assert haversine_km(0, 0, 0, 0.1) == pytest.approx(11.1195, abs=1e-3)


coords = st.tuples(st.floats(-90, 90), st.floats(-180, 180))


@given(coords, coords)
def test_haversine_symmetric_and_matches_chord_formula(a, b):
    d = haversine_km(*a, *b)
    assert d == pytest.approx(haversine_km(*b, *a), abs=1e-9)
    assert d == pytest.approx(gc_distance(*a, *b), abs=1e-6)
    assert 0 <= d <= math.pi * 6371 + 1e-6


# -- spatial index ----------------------------------------------------------

def random_stations(rng, n, box=(47.3, 5.9, 55.0, 15.0)):
    return [GasStation(f"st{i:05d}", rng.uniform(box[0], box[2]), rng.uniform(box[1], box[3]))
            for i in range(n)]


def ids(hits):
    return [s.station_id for s, _ in hits]


def test_index_equals_linear_scan_on_random_corpus():
    rng = random.Random(7)
    stations = random_stations(rng, 1000)
    index = StationIndex(stations)
    for _ in range(100):
        lat, lon = rng.uniform(47.3, 55.0), rng.uniform(5.9, 15.0)
        radius = rng.choice([1.0, 5.0, 10.0, 25.0, 60.0])
        got = nearby_stations(index, lat, lon, radius)
        want = linear_scan(stations, lat, lon, radius)
        assert set(ids(got)) == set(ids(want))
        assert ids(got) == ids(want)


def test_boundary_in_and_out():
    lat, lon = 50.0, 8.0
    inside = GasStation("in", *destination(lat, lon, 45, 9.9))
    outside = GasStation("out", *destination(lat, lon, 200, 10.1))
    index = StationIndex([inside, outside])
    assert ids(index.nearby(lat, lon, 10)) == ["in"]


def test_radius_zero_and_colocated_ties():
    a, b = GasStation("b", 50.0, 8.0), GasStation("a", 50.0, 8.0)
    c = GasStation("c", 50.0001, 8.0)
    index = StationIndex([a, b, c])
    assert ids(index.nearby(50.0, 8.0, 0)) == ["a", "b"]
    assert ids(index.nearby(50.0, 8.0, 1)) == ["a", "b", "c"]


def test_empty_index_answers_empty():
    index = StationIndex([])
    assert index.nearby(0, 0, 100) == [] and len(index) == 0


def test_duplicate_ids_rejected():
    with pytest.raises(DuplicateStationId):
        StationIndex([GasStation("x", 1, 1), GasStation("x", 2, 2)])


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(0.0, 179.99), (0.0, -179.99), (89.99, 0.0), (-89.95, 120.0),
                        (60.0, 180.0), (-45.0, -180.0)]),
       st.integers(0, 2**16), st.floats(1, 80))
def test_antimeridian_and_poles(centre, seed, radius):
    rng = random.Random(seed)
    lat0, lon0 = centre
    stations = [GasStation(f"s{i}", *destination(lat0, lon0, rng.uniform(0, 360),
                                                 rng.uniform(0, 2 * radius)))
                for i in range(60)]
    got = StationIndex(stations, capacity=4).nearby(lat0, lon0, radius)
    assert ids(got) == ids(linear_scan(stations, lat0, lon0, radius))


def test_large_corpus_is_sublinear():
    rng = random.Random(11)
    stations = random_stations(rng, 30_000)
    t0 = time.perf_counter()
    index = StationIndex(stations)
    assert time.perf_counter() - t0 <= 5.0
    for _ in range(100):
        index.nearby(rng.uniform(47.3, 55.0), rng.uniform(5.9, 15.0), 10.0)
    assert index.visits / index.queries < 0.05 * len(stations)


# -- prices -----------------------------------------------------------------

def test_cache_fetches_once_within_ttl():
    src = StaticPriceSource({"s1": {"e5": 1.5, "e10": 1.45, "diesel": 1.3}})
    cache = PriceCache(src, ttl_s=300)
    assert cache.current_price("s1", "e5", 0) == 1.5
    assert cache.current_price("s1", "e5", 10_000) == 1.5
    assert cache.current_price("s1", "diesel", 20_000) == 1.3
    assert src.fetches == 1
    src.prices["s1"]["e5"] = 1.6
    assert cache.current_price("s1", "e5", 300_000) == 1.6
    assert src.fetches == 2


def test_unknown_station():
    cache = PriceCache(StaticPriceSource({}))
    with pytest.raises(StationNotFound):
        cache.current_price("nope", "e5", 0)


def test_http_price_source_against_stub():
    from cisflow.cis.httpstub import StubServer
    with StubServer({"s 1": {"e5": 1.5, "e10": 1.4, "diesel": 1.2}}) as stub:
        src = HttpPriceSource(stub.url)
        assert src.fetch("s 1", 0) == {"e5": 1.5, "e10": 1.4, "diesel": 1.2}
        with pytest.raises(StationNotFound):
            src.fetch("unknown", 0)
        cache = PriceCache(src)
        cache.current_price("s 1", "e10", 0)
        cache.current_price("s 1", "e10", 10_000)
        assert stub.price_requests == 3  # direct fetch, the 404, one cache fill


def test_history_constant_and_halves():
    now = 30 * DAY
    h = PriceHistory([PriceEvent("s", "e5", 1.5, now - 8 * DAY)])
    assert historical_average(h, "s", "e5", 7, now).mean == pytest.approx(1.5)
    h = PriceHistory([PriceEvent("s", "e5", 1.4, now - 7 * DAY),
                      PriceEvent("s", "e5", 1.6, now - 3.5 * DAY)])
    stats = historical_average(h, "s", "e5", 7, now)
    assert stats.mean == pytest.approx(1.5) and (stats.min, stats.max) == (1.4, 1.6)


def test_history_carry_forward_and_missing():
    now = 40 * DAY
    h = PriceHistory([PriceEvent("s", "e5", 1.55, now - 30 * DAY)])
    assert historical_average(h, "s", "e5", 7, now).mean == 1.55
    with pytest.raises(NoHistory):
        historical_average(h, "s", "diesel", 7, now)
    with pytest.raises(NoHistory):
        historical_average(PriceHistory([PriceEvent("s", "e5", 1.5, now + 1)]), "s", "e5", 7, now)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 14 * 24), st.integers(120, 200)), min_size=1, max_size=8))
def test_history_mean_matches_hourly_sampling(events):
    now = 14 * DAY
    evs = [(h * HOUR, c / 100) for h, c in events]
    history = PriceHistory(PriceEvent("s", "e5", p, t) for t, p in evs)
    # later events at the same instant win, so give the oracle the same view
    dedup = {}
    for t, p in evs:
        dedup[t] = p
    want = stepwise_mean(sorted(dedup.items()), now - 7 * DAY, now, HOUR)
    got = historical_average(history, "s", "e5", 7, now)
    assert got.mean == pytest.approx(want, abs=1e-9)


# -- recommendation ---------------------------------------------------------

def two_station_context(price_a=1.50, price_b=1.40, hist_b=1.45):
    lat, lon = 50.0, 8.0
    a = GasStation("A", *destination(lat, lon, 90, 2.0))
    b = GasStation("B", *destination(lat, lon, 270, 9.0))
    now = 20 * DAY
    history = PriceHistory([PriceEvent("A", "e5", 1.5, now - 10 * DAY),
                            PriceEvent("B", "e5", hist_b, now - 10 * DAY)])
    prices = PriceCache(StaticPriceSource({"A": {"e5": price_a}, "B": {"e5": price_b}}))
    return RecommendContext(StationIndex([a, b]), prices, history), lat, lon, now


def test_farther_cheaper_station_wins():
    rctx, lat, lon, now = two_station_context()
    out = recommend_station(VehicleReading("v", now, lat, lon, 0, {"FUEL_LEVEL": "40"}), rctx)
    assert isinstance(out, Recommendation)
    assert out.station_id == "B" and out.reason == "good_price"
    cfg = RecommenderConfig()
    # one-way detour: 1.50*30 + 2*0.07*1.50 and 1.40*30 + 9*0.07*1.40
    assert fill_cost(1.50, 2.0, 40, cfg) == pytest.approx(45.21)
    assert fill_cost(1.40, 9.0, 40, cfg) == pytest.approx(42.882)
    assert out.expected_fill_cost == pytest.approx(42.882, abs=1e-6)
    assert out.price_per_liter == 1.40


def test_low_fuel_overrides_expensive_price():
    rctx, lat, lon, now = two_station_context(price_a=1.9, price_b=1.8, hist_b=1.45)
    out = recommend_station(VehicleReading("v", now, lat, lon, 0, {"FUEL_LEVEL": "10"}), rctx)
    assert isinstance(out, Recommendation) and out.reason == "low_fuel"
    out = recommend_station(VehicleReading("v", now, lat, lon, 0, {"FUEL_LEVEL": "30"}), rctx)
    assert out == NoRecommendation("v", "wait_for_drop", now)


def test_no_station_and_no_price():
    rctx, lat, lon, now = two_station_context()
    far = recommend_station(VehicleReading("v", now, lat + 1, lon, 0, {"FUEL_LEVEL": "10"}), rctx)
    assert far.reason == "no_station"
    rctx.prices.source.down = True
    rctx.prices = PriceCache(rctx.prices.source)
    out = recommend_station(VehicleReading("v", now, lat, lon, 0, {"FUEL_LEVEL": "10"}), rctx)
    assert out.reason == "no_price"


def test_config_rejects_inconsistent_thresholds():
    with pytest.raises(ValueError):
        RecommenderConfig(critical_fuel_pct=60)
    with pytest.raises(ValueError):
        RecommenderConfig(radius_km=0)


@given(st.floats(1.0, 2.5), st.floats(0, 20), st.floats(0, 20), st.floats(0, 99.9))
def test_cost_monotone_in_distance(price, d1, d2, fuel):
    cfg = RecommenderConfig()
    lo, hi = sorted((d1, d2))
    assert fill_cost(price, lo, fuel, cfg) <= fill_cost(price, hi, fuel, cfg)


@given(st.floats(1.0, 2.5), st.floats(1.0, 2.5), st.floats(0, 20), st.floats(0, 99.9))
def test_cost_monotone_in_price(p1, p2, dist, fuel):
    cfg = RecommenderConfig()
    lo, hi = sorted((p1, p2))
    assert fill_cost(lo, dist, fuel, cfg) <= fill_cost(hi, dist, fuel, cfg)


def test_recommendation_table_sample():
    rng = random.Random(2024)
    for _ in range(60):
        case = random_recommend_case(rng)
        assert same_outcome(run_case(case), brute_force_recommend(case)), case


# -- CSV and store ----------------------------------------------------------

def test_csv_roundtrip_and_store(tmp_path):
    from cisflow.theta.store import ImmutableStore
    stations = [GasStation("a", 50.1, 8.2, "Alpha, Inc"), GasStation("b", -1.5, 100.25, "B")]
    events = [PriceEvent("a", "e5", 1.579, parse_iso_utc("2015-06-01T08:00:00Z")),
              PriceEvent("b", "diesel", 1.199, parse_iso_utc("2015-06-01T09:30:00+00:00"))]
    write_stations_csv(tmp_path / "s.csv", stations)
    write_prices_csv(tmp_path / "p.csv", events)
    assert load_stations_csv(tmp_path / "s.csv") == stations
    assert load_prices_csv(tmp_path / "p.csv") == events
    store = ImmutableStore()
    ingest_stations(store, stations)
    ingest_prices(store, events)
    assert stations_from_store(store) == stations and prices_from_store(store) == events


def test_csv_header_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,lat,lon\n1,2,3\n")
    with pytest.raises(CsvFormatError):
        load_stations_csv(p)
    p.write_text("station_id,fuel,price,effective_from\nx,petrol,1.5,2015-01-01T00:00:00Z\n")
    with pytest.raises(CsvFormatError):
        load_prices_csv(p)
