"""The eleven acceptance criteria, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line straight to the
terminal (bypassing capture) before asserting.
"""

import json
import random
import time
from collections import Counter

import pytest

import chains
from cis_cases import run_case, same_outcome
from cis_oracles import brute_force_recommend, gc_distance, random_recommend_case, trip_oracle
from cisflow.cis.app import FirstAppearanceFilter, decode_processor
from cisflow.cis.filters import first_appearances
from cisflow.cis.model import GasStation, VehicleReading
from cisflow.cis.recommend import RecommenderConfig
from cisflow.cis.rtree import StationIndex
from cisflow.cluster import FaultPlan
from cisflow.engine.core import Context, Dependency, LocalBackend, build_stages, recompute_partition
from cisflow.engine.stream import StreamingContext, StreamRecord
from cisflow.harness.cli import main
from cisflow.harness.experiments import run_failover_experiment, run_scaling_experiment
from cisflow.harness.scenarios import LoadGenerator, LoadScenario, RateSchedule
from cisflow.theta.chain import StreamSource


@pytest.fixture
def verdict(capsys):
    def record(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return record


# -- 1. engine oracle suite --------------------------------------------------

def test_criterion_01_engine_matches_list_interpreter(verdict):
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(500):
        items, n_parts, ops = chains.random_chain(random.Random(seed), max_ops=6)
        assert len(items) <= 100 and len(ops) <= 6
        ds, _ = chains.build(Context(LocalBackend(2, 2)), items, n_parts, ops)
        want = chains.interpret(items, ops)
        got = ds.collect()
        same = sorted(got) == sorted(want) if chains.has_wide(ops) else got == want
        if not same or ds.count() != len(want):
            mismatches += 1
    took = time.perf_counter() - t0
    verdict(1, mismatches == 0 and took < 30, f"500 chains, {mismatches} mismatches, {took:.1f} s")


# -- 2. stage rule -----------------------------------------------------------

def test_criterion_02_stage_count_rule(verdict):
    violations = 0
    for seed in range(100):
        rng = random.Random(10_000 + seed)
        items, n_parts, ops = chains.random_chain(rng, max_ops=6)
        # make sure most DAGs actually have a shuffle on the evaluated path
        if not chains.has_wide(ops) and seed % 2 == 0:
            keyed = [op[0] for op in ops if op[0] in ("key_by", "unkey")][-1:] == ["key_by"]
            ops = ops + ([] if keyed else [("key_by", 3)]) + [("reduce", 1)]
        ds, _ = chains.build(Context(), items, n_parts, ops)
        stages = build_stages(ds)
        if len(stages) != chains.shuffle_dependency_count(ops) + 1:
            violations += 1
        by_id = {d.id: d for d in ds.lineage()}
        for stage in stages:
            for member in stage.pipeline:
                d = by_id[member]
                if d.dependency is Dependency.WIDE and any(p.id in stage.pipeline for p in d.parents):
                    violations += 1
    verdict(2, violations == 0, f"100 DAGs, {violations} violations")


# -- 3. lineage recovery -----------------------------------------------------

def test_criterion_03_lineage_recovery(verdict):
    bad_content = bad_counters = checked = 0
    for seed in range(500):
        items, n_parts, ops = chains.random_chain(random.Random(seed), max_ops=6)
        ctx = Context(LocalBackend(2, 2))
        ds, created = chains.build(ctx, items, n_parts, ops)
        for d in created:
            d.persist()
        ds.collect()
        for d in created:
            d.count()
        for d in created:
            parts = d.collect_partitions()
            for p in range(d.num_partitions):
                d.drop_cached_partition(p)
                checked += 1
                if recompute_partition(d, p) != parts[p]:
                    bad_content += 1
        # a persisted mid node stops recomputation of everything above it
        chain = [d for d in ds.lineage() if d.id in {c.id for c in created}]
        if len(chain) < 3:
            continue
        ctx2 = Context(LocalBackend(2, 2))
        ds2, created2 = chains.build(ctx2, items, n_parts, ops)
        lineage2 = ds2.lineage()
        mid = lineage2[len(lineage2) // 2]
        mid.persist()
        ds2.persist()
        parts = ds2.collect_partitions()
        mid.count()
        above = [a for a in mid.lineage() if a.id != mid.id]
        before = ctx2.metrics.evaluations_of(*above)
        for p in range(ds2.num_partitions):
            ds2.drop_cached_partition(p)
            if recompute_partition(ds2, p) != parts[p]:
                bad_content += 1
        if ctx2.metrics.evaluations_of(*above) != before:
            bad_counters += 1
    ok = bad_content == 0 and bad_counters == 0
    verdict(3, ok, f"{checked} partitions recomputed, {bad_content} content mismatches, "
                   f"{bad_counters} chains recomputed above a persisted node")


# -- 4. window oracle --------------------------------------------------------

def regroup(inputs, w, s):
    """Brute force: the window firing at t holds intervals t-w+1 .. t."""
    out = {}
    for t in range(1, len(inputs) + 1):
        if t % s == 0:
            out[t] = sorted(x for b in range(max(1, t - w + 1), t + 1) for x in inputs[b - 1])
    return out


def test_criterion_04_windows_match_regrouping(verdict):
    mismatches, pairs = [], 0
    for w in range(1, 7):
        for s in range(1, w + 1):
            pairs += 1
            rng = random.Random(f"window:{w}:{s}")
            inputs = [[rng.randint(0, 999) for _ in range(rng.randint(0, 8))] for _ in range(12)]
            ssc = StreamingContext(Context(LocalBackend(1, 2)), 1000)
            got = {}
            ssc.queue_stream(inputs).window(w * 1000, s * 1000).foreach_batch(
                lambda b, ds: got.__setitem__(b, sorted(ds.collect())))
            ssc.run_batches(12)
            if got != regroup(inputs, w, s):
                mismatches.append((w, s))
    # the two figure cases, spelled out
    ssc = StreamingContext(Context(LocalBackend(1, 2)), 1000)
    g31, g32 = {}, {}
    src = ssc.queue_stream([["i1"], ["i2"], ["i3"], ["i4"], ["i5"]])
    src.window(3000, 1000).foreach_batch(lambda b, ds: g31.__setitem__(b, sorted(ds.collect())))
    src.window(3000, 2000).foreach_batch(lambda b, ds: g32.__setitem__(b, sorted(ds.collect())))
    ssc.run_batches(5)
    figures = (g31[3] == ["i1", "i2", "i3"] and g31[5] == ["i3", "i4", "i5"]
               and sorted(g32) == [2, 4] and g32[4] == ["i2", "i3", "i4"])
    verdict(4, not mismatches and figures,
            f"{pairs} (window, slide) pairs, mismatches {mismatches}, figure cases ok={figures}")


# -- 5. exactly-once under faults ------------------------------------------

def random_fault_plan(seed):
    rng = random.Random(f"plan:{seed}")
    t_worker, t_driver = rng.sample(range(2000, 18_000), 2)
    items = [{"t_ms": t_worker, "event": "kill_worker", "node": f"worker-{rng.randint(0, 2)}"},
             {"t_ms": t_driver, "event": "kill_driver"}]
    return FaultPlan.from_json(sorted(items, key=lambda it: it["t_ms"]))


def test_criterion_05_exactly_once_under_faults(verdict):
    dupes = lost = unreliable_dupes = unreliable_lost = 0
    for seed in range(20):
        plan = random_fault_plan(seed)
        res = run_failover_experiment(plan, rate=500, seed=seed, duration_s=20)
        assert len(res.sent) == 10_000
        counts = Counter(res.observed)
        dupes += sum(c - 1 for c in counts.values())
        lost += len(set(res.sent) - set(counts))
        twin = run_failover_experiment(plan, rate=500, seed=seed, duration_s=20, reliable=False)
        tc = Counter(twin.observed)
        unreliable_dupes += sum(c - 1 for c in tc.values()) + len(set(tc) - set(twin.sent))
        unreliable_lost += len(set(twin.sent) - set(tc))
    ok = dupes == 0 and lost == 0 and unreliable_dupes == 0
    verdict(5, ok, f"20 runs x 10000 msgs: duplicates={dupes} losses={lost}; unreliable twins: "
                   f"duplicates={unreliable_dupes} losses={unreliable_lost}")


# -- 6. failover signatures --------------------------------------------------

def test_criterion_06_failover_signatures(verdict):
    worker = run_failover_experiment(
        FaultPlan.from_json([{"t_ms": 7050, "event": "kill_worker", "node": "worker-1"}]), seed=6)
    master = run_failover_experiment(
        FaultPlan.from_json([{"t_ms": 6500, "event": "kill_master", "node": "master-0"}]), seed=6)
    driver = run_failover_experiment(
        FaultPlan.from_json([{"t_ms": 8300, "event": "kill_driver"}]), seed=6)
    wk = worker.events[0]
    spike = next(c for c in worker.verdict.checks if c.name == "worker_kill_spike")
    ok_worker = worker.verdict.passed and spike.passed and wk["recomputed_delta"] >= 1
    ok_master = master.verdict.passed and master.metrics.leader_elections == 1
    rows = driver.report.rows
    # whole seconds between the kill at 8.3 s and the restart at 11.3 s
    gap = [r for r in rows if 10_000 <= r.ts <= 11_000]
    ok_driver = (driver.verdict.passed and all(r.processed == 0 for r in gap)
                 and max(r.received for r in rows if 11_000 < r.ts <= 14_000) > 500
                 and sum(r.processed for r in rows) == len(driver.sent))
    verdict(6, ok_worker and ok_master and ok_driver,
            f"worker kill: {spike.detail}; master kill twin identical={ok_master}; "
            f"driver kill gap+burst+conservation={ok_driver}")


# -- 7. live state counts ----------------------------------------------------

def live_states_after(scenario, rate, seconds):
    gen = LoadGenerator(scenario, 7)
    batches = []
    for t in range(seconds):
        batches.append([StreamRecord(f"m{t}-{i}", json.dumps(doc).encode(), ts)
                        for i, (ts, doc) in enumerate(gen.messages(rate, t))])
    ssc = StreamingContext(Context(LocalBackend(2, 2)), 1000)
    source = StreamSource(ssc, "raw", lambda c: c.queue_stream(batches, num_partitions=5))
    first = FirstAppearanceFilter(RecommenderConfig())
    first.use(decode_processor().use(source)).stream.foreach_batch(lambda b, ds: ds.count())
    ssc.run_batches(seconds)
    return first.state.live_states()


def test_criterion_07_state_counts(verdict):
    ls3 = live_states_after(LoadScenario.named("ls3"), 1000, 30)
    ls2 = live_states_after(LoadScenario.named("ls2", 1000), 1000, 30)
    verdict(7, ls3 == 30_000 and ls2 == 1000, f"LS3 -> {ls3} states, LS2(1000) -> {ls2} states")


# -- 8. spatial index --------------------------------------------------------

def corpus(rng, n):
    return [GasStation(f"st{i:05d}", rng.uniform(47.3, 55.0), rng.uniform(5.9, 15.0))
            for i in range(n)]


def test_criterion_08_spatial_index(verdict):
    rng = random.Random(8)
    small = corpus(rng, 1000)
    index = StationIndex(small)
    wrong = 0
    for _ in range(100):
        lat, lon, r = rng.uniform(47.0, 55.3), rng.uniform(5.5, 15.5), rng.uniform(1.0, 60.0)
        got = {s.station_id for s, _ in index.nearby(lat, lon, r)}
        want = {s.station_id for s in small if gc_distance(lat, lon, s.latitude, s.longitude) <= r}
        wrong += got != want
    big = corpus(rng, 30_000)
    t0 = time.perf_counter()
    big_index = StationIndex(big)
    build_s = time.perf_counter() - t0
    worst = 0
    for _ in range(100):
        before = big_index.visits
        big_index.nearby(rng.uniform(47.3, 55.0), rng.uniform(5.9, 15.0), 10.0)
        worst = max(worst, big_index.visits - before)
    ok = wrong == 0 and worst < 0.05 * len(big) and build_s <= 5.0
    verdict(8, ok, f"{wrong}/100 result sets differ from the linear scan; worst visits "
                   f"{worst} of {len(big)} ({worst / len(big):.2%}); build {build_s:.2f} s")


# -- 9. recommendation logic -------------------------------------------------

def test_criterion_09_recommendation_table(verdict):
    rng = random.Random(9)
    mismatches = 0
    for _ in range(200):
        case = random_recommend_case(rng)
        mismatches += not same_outcome(run_case(case), brute_force_recommend(case))
    # per-trip uniqueness on random reading streams split over batches
    gap = RecommenderConfig().trip_gap_ms
    trip_mismatches = 0
    for k in range(200):
        r = random.Random(f"trip:{k}")
        rows = sorted(((r.choice("abcd"), r.randint(0, 4 * gap), f"m{i:03d}") for i in range(30)),
                      key=lambda x: (x[1], x[2]))
        states, got, prev = {}, [], 0
        for cut in sorted(r.sample(range(len(rows) + 1), 3)) + [len(rows)]:
            batch = [VehicleReading(v, t, 50.0, 8.0, 0.0, {"FUEL_LEVEL": "10"}, m)
                     for v, t, m in rows[prev:cut]]
            got += [x.message_id for x in first_appearances(batch, gap, states)]
            prev = max(prev, cut)
        trip_mismatches += sorted(got) != sorted(trip_oracle(rows, gap))
    verdict(9, mismatches == 0 and trip_mismatches == 0,
            f"200 cases, {mismatches} mismatches; 200 trip streams, {trip_mismatches} mismatches")


# -- 10. scaling trend -------------------------------------------------------

def test_criterion_10_scaling_trend(verdict):
    t0 = time.perf_counter()
    res = run_scaling_experiment([1, 2, 4], LoadScenario.named("gas-search"), RateSchedule(), seed=0)
    took = time.perf_counter() - t0
    rates = [res.max_rate[n] for n in (1, 2, 4)]
    trend = all(a <= b for a, b in zip(rates, rates[1:])) and rates[0] < rates[-1]
    verdict(10, trend and took <= 600,
            f"max sustainable rate 1/2/4 workers = {rates}, {took:.0f} s")


# -- 11. determinism ---------------------------------------------------------

def test_criterion_11_identical_seeds_identical_csv(tmp_path, verdict):
    load_args = ["load", "--scenario", "gas-search", "--workers", "1,2", "--step", "500",
                 "--max", "2000", "--dwell", "10", "--seed", "11"]
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps([{"t_ms": 4100, "event": "kill_worker", "node": "worker-2"},
                                {"t_ms": 6000, "event": "kill_master", "node": "master-0"},
                                {"t_ms": 9700, "event": "kill_driver"}]))
    outs = []
    for i in range(2):
        a, b = tmp_path / f"load{i}.csv", tmp_path / f"failover{i}.csv"
        assert main(load_args + ["--out", str(a)]) == 0
        assert main(["failover", "--plan", str(plan), "--seed", "11", "--out", str(b)]) in (0, 1)
        outs.append((a.read_bytes(), b.read_bytes()))
    same_load = outs[0][0] == outs[1][0]
    same_failover = outs[0][1] == outs[1][1]
    verdict(11, same_load and same_failover,
            f"load identical={same_load} ({len(outs[0][0])} bytes), "
            f"failover identical={same_failover} ({len(outs[0][1])} bytes)")
