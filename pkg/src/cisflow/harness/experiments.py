"""Scaling and failover experiments against the simulated cluster.

Both experiments share one drive loop.  Each virtual second's messages are
published in five 200 ms slices, the cluster is advanced after every slice,
and one report row is sampled on each full second.  Second ``s`` covers
the batch that seals at ``s * 1000`` ms.
"""

from __future__ import annotations

import statistics
import tempfile
from dataclasses import dataclass, field
from typing import Optional

from ..cis.app import (
    RawArchive,
    VEHICLE_TOPIC,
    FirstAppearanceFilter,
    car_data_source,
    decode_processor,
    fuel_level_filter,
    gas_station_search,
    notification_output,
)
from ..cis.prices import HistoryPriceSource, PriceCache, PriceHistory
from ..cis.recommend import RecommenderConfig
from ..cis.rtree import build_station_index
from ..clock import VirtualClock
from ..cluster import Cluster, ClusterConfig, ClusterMetrics, FaultEvent, FaultPlan
from ..engine.stream import BatchStats, StreamingContext
from ..theta.broker import Broker
from ..theta.store import ImmutableStore
from .report import ReportRow, RunReport
from .scenarios import LoadGenerator, LoadScenario, RateSchedule, random_price_events, random_stations

# virtual cost of one gas-station search (index query, price lookup, history)
GAS_SEARCH_COST_MS = 1.0
# virtual cost of visiting one trip state during a state update
STATE_COST_MS = 0.01
SLICES_PER_SECOND = 5
SPIKE_FACTOR = 3.0


@dataclass(frozen=True)
class AppSettings:
    search_cost_ms: float = GAS_SEARCH_COST_MS
    state_cost_ms: float = STATE_COST_MS
    n_stations: int = 2000
    reliable: bool = True
    checkpoint_dir: Optional[str] = None
    checkpoint_interval_ms: int = 10_000
    archive: bool = False


class Rig:
    """Clock, broker, store, cluster and one streaming application."""

    def __init__(self, scenario: LoadScenario, cluster_cfg: ClusterConfig,
                 settings: AppSettings = AppSettings(), seed: int = 0):
        self.scenario = scenario
        self.settings = settings
        self.clock = VirtualClock(0)
        self.broker = Broker(self.clock)
        self.store = ImmutableStore(clock=self.clock)
        self.gen = LoadGenerator(scenario, seed)
        self.sent: list[str] = []
        self.archive: Optional[RawArchive] = None
        if scenario.kind == "gas-search":
            stations = random_stations(settings.n_stations, seed)
            self.index = build_station_index(stations)
            self.history = PriceHistory(random_price_events(stations, seed, now_ms=0))
        self.cluster = Cluster(cluster_cfg, self.clock)
        self.app = self.cluster.submit_application(self._factory, name=scenario.kind)

    def _factory(self, ctx) -> StreamingContext:
        st = self.settings
        ssc = StreamingContext(ctx, 1000, clock=self.clock, checkpoint_dir=st.checkpoint_dir,
                               checkpoint_interval_ms=st.checkpoint_interval_ms)
        source = car_data_source(ssc, self.broker, reliable=st.reliable)
        if st.archive:
            self.archive = RawArchive(self.store)
            source.typed().stream.foreach_batch(self.archive.write)
        cfg = RecommenderConfig()
        decoded = decode_processor().use(source)
        if self.scenario.kind == "gas-search":
            prices = PriceCache(HistoryPriceSource(self.history), cfg.price_cache_ttl_s)
            search = gas_station_search(ssc.ctx.broadcast(self.index), prices, self.history,
                                        cfg, cost_ms=st.search_cost_ms)
            outcomes = search.use(fuel_level_filter(cfg).use(decoded))
            notification_output(self.broker).use(outcomes)
        else:
            first = FirstAppearanceFilter(cfg, state_cost_ms=st.state_cost_ms).use(decoded)
            first.stream.foreach_batch(lambda b, ds: ds.count())
        return ssc

    # -- driving -----------------------------------------------------------

    @property
    def ssc(self) -> StreamingContext:
        return self.app.ssc

    def live_workers(self) -> int:
        return sum(1 for w in self.cluster.workers if w.alive)

    def drive_second(self, s: int, rate: int, faults: list, on_fault=None) -> None:
        """Publish second ``s`` worth of messages and advance to ``s * 1000``."""
        msgs = self.gen.messages(rate, s - 1) if rate else []
        i = 0
        for k in range(1, SLICES_PER_SECOND + 1):
            end = (s - 1) * 1000 + k * (1000 // SLICES_PER_SECOND)
            while faults and faults[0][0] <= end:
                t, ev = faults.pop(0)
                self.clock.advance_to(max(t, self.clock()))
                while i < len(msgs) and msgs[i][0] <= t:
                    self.sent.append(self.broker.publish(VEHICLE_TOPIC, msgs[i][1]))
                    i += 1
                if on_fault is not None:
                    on_fault(t, ev)
                else:
                    self.cluster.inject_fault(ev, now=t)
            self.clock.advance_to(max(end, self.clock()))
            while i < len(msgs) and msgs[i][0] <= end:
                self.sent.append(self.broker.publish(VEHICLE_TOPIC, msgs[i][1]))
                i += 1
            self.cluster.advance(end)

    def sample(self, s: int, rate: int) -> dict:
        """Live values at the end of second ``s``."""
        received = waiting = 0
        if self.app.driver_alive:
            ssc = self.ssc
            waiting = ssc.waiting_batches
            received = sealed_count(ssc, s)
        return {"ts": s * 1000, "target_rate": rate, "received": received,
                "waiting_batches": waiting, "workers": self.live_workers()}

    def first_completions(self) -> dict[int, BatchStats]:
        first: dict[int, BatchStats] = {}
        for ssc in self.app.incarnations:
            for b in ssc.completed:
                if b.batch_id not in first or b.end_ms < first[b.batch_id].end_ms:
                    first[b.batch_id] = b
        return first


def sealed_count(ssc: StreamingContext, batch_id: int) -> int:
    """Input count of a sealed batch, wherever it currently sits."""
    candidates = list(ssc._queue)
    if ssc._running is not None:
        candidates.append(ssc._running)
    for b in candidates:
        if b.batch_id == batch_id:
            return b.input_count
    for b in reversed(ssc.completed):
        if b.batch_id == batch_id:
            return b.input_count
        if b.batch_id < batch_id:
            break
    return 0


def build_rows(samples: list[dict], completions: dict[int, BatchStats]) -> list[ReportRow]:
    """Attach processed counts and batch durations to the live samples.

    A batch counts as processed in the second in which it first completed;
    replays after a driver restart are not counted again.
    """
    by_end = sorted(completions.values(), key=lambda b: (b.end_ms, b.batch_id))
    rows, j = [], 0
    for smp in samples:
        ts = smp["ts"]
        processed, batch_ms = 0, 0.0
        while j < len(by_end) and by_end[j].end_ms <= ts:
            if by_end[j].end_ms > ts - 1000:
                processed += by_end[j].input_count
                batch_ms = by_end[j].processing_ms
            j += 1
        rows.append(ReportRow(ts, smp["target_rate"], smp["received"], processed,
                              round(batch_ms, 6), smp["waiting_batches"], smp["workers"]))
    return rows


# -- scaling -------------------------------------------------------------

def is_sustainable(waiting: list[int], window: int = 3) -> bool:
    """Waiting batches do not grow over the dwell: late max ≤ early max."""
    if len(waiting) < 2 * window:
        return max(waiting, default=0) <= (waiting[0] if waiting else 0)
    return max(waiting[-window:]) <= max(waiting[:window])


def overload_run(waiting: list[int]) -> int:
    """Most consecutive ticks on which the waiting count strictly rose."""
    best = cur = 0
    for a, b in zip(waiting, waiting[1:]):
        cur = cur + 1 if b > a else 0
        best = max(best, cur)
    return best


@dataclass
class ScalingResult:
    report: RunReport
    max_rate: dict[int, int]
    steps: dict[int, list[tuple[int, bool]]] = field(default_factory=dict)


def scaling_cluster(n_workers: int, seed: int = 0) -> ClusterConfig:
    return ClusterConfig(n_workers=n_workers, slots_per_worker=2, n_masters=1,
                         replication_factor=min(2, n_workers), seed=seed)


def run_load(scenario: LoadScenario, n_workers: int, schedule: RateSchedule, seed: int = 0,
             settings: AppSettings = AppSettings(), stop_on_overload: bool = True):
    """Step the rate on one cluster size; returns rows, max rate and per-step verdicts."""
    rig = Rig(scenario, scaling_cluster(n_workers, seed), settings, seed)
    samples, steps, max_rate, s = [], [], 0, 0
    for rate in schedule.rates():
        waiting = []
        for _ in range(schedule.dwell_s):
            s += 1
            rig.drive_second(s, rate, [])
            smp = rig.sample(s, rate)
            samples.append(smp)
            waiting.append(smp["waiting_batches"])
        ok = is_sustainable(waiting)
        steps.append((rate, ok))
        if ok:
            max_rate = rate
        elif stop_on_overload:
            break
    return build_rows(samples, rig.first_completions()), max_rate, steps


def run_scaling_experiment(worker_counts: list[int], scenario: LoadScenario,
                           schedule: RateSchedule = RateSchedule(), seed: int = 0,
                           settings: AppSettings = AppSettings()) -> ScalingResult:
    """One restarted cluster per worker count; the timestamp restarts with each."""
    result = ScalingResult(RunReport(), {})
    for n in worker_counts:
        rows, max_rate, steps = run_load(scenario, n, schedule, seed, settings)
        result.report.extend(rows)
        result.max_rate[n] = max_rate
        result.steps[n] = steps
    return result


# -- failover ------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class Verdict:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def summary(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in self.checks]
        lines.append("verdict: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


@dataclass
class FailoverResult:
    report: RunReport
    verdict: Verdict
    metrics: ClusterMetrics
    sent: list[str]
    observed: list[str]
    events: list[dict]


def failover_cluster(seed: int = 0) -> ClusterConfig:
    return ClusterConfig(n_workers=3, slots_per_worker=2, n_masters=3,
                         replication_factor=2, seed=seed)


def _uses_worker(batch, worker: str) -> bool:
    return any(t.worker == worker for j in batch.jobs for st in j.stages for t in st.tasks)


def _drive_failover(plan: FaultPlan, scenario: LoadScenario, rate: int, seed: int,
                    duration_s: int, drain_s: int, reliable: bool, settings: AppSettings,
                    workdir: str):
    st = AppSettings(settings.search_cost_ms, settings.state_cost_ms, settings.n_stations,
                     reliable, workdir, settings.checkpoint_interval_ms, True)
    rig = Rig(scenario, failover_cluster(seed), st, seed)
    events: list[dict] = []

    def on_fault(t: int, ev: FaultEvent) -> None:
        cl = rig.cluster
        cl.advance(t)
        info = {"t_ms": t, "event": ev.kind, "node": ev.node, "target_rate": rate}
        before = cl.metrics_snapshot().recomputed_stages
        if ev.kind == "kill_worker" and rig.app.driver_alive:
            ssc = rig.ssc
            b = ssc._running
            info["active"] = None
            if b is not None and b.start_ms <= t < b.end_ms:
                info["active"] = b.batch_id
                info["active_hit"] = _uses_worker(b, ev.node)
            info["baseline"] = [x.processing_ms for x in ssc.completed[-10:]]
            info["incarnation"] = len(rig.app.incarnations) - 1
        cl.inject_fault(ev, now=t)
        info["recomputed_delta"] = cl.metrics_snapshot().recomputed_stages - before
        if ev.kind == "kill_driver":
            info["restart_at"] = rig.app.restart_at
        events.append(info)

    faults = list(plan.events)
    samples = []
    s = 0
    for _ in range(duration_s):
        s += 1
        rig.drive_second(s, rate, faults, on_fault)
        samples.append(rig.sample(s, rate))
    for _ in range(drain_s):
        s += 1
        rig.drive_second(s, 0, faults, on_fault)
        samples.append(rig.sample(s, 0))
        done = sum(b.input_count for b in rig.first_completions().values())
        if not faults and done >= len(rig.sent) and rig.app.driver_alive \
                and rig.ssc.waiting_batches == 0 and rig.ssc._running is None:
            break
    rows = build_rows(samples, rig.first_completions())
    return rig, rows, events


def _batch_signature(rig: Rig) -> list[tuple]:
    return [tuple(vars(b).values()) for b in rig.app.all_batches()]


def run_failover_experiment(plan: FaultPlan, scenario: Optional[LoadScenario] = None,
                            rate: int = 500, *, seed: int = 0, duration_s: Optional[int] = None,
                            drain_s: int = 30, reliable: bool = True,
                            settings: AppSettings = AppSettings(),
                            workdir: Optional[str] = None) -> FailoverResult:
    """Run a fault plan on a three-master, three-worker cluster and judge it."""
    scenario = scenario or LoadScenario.named("gas-search")
    last = max((t for t, _ in plan.events), default=0)
    if duration_s is None:
        duration_s = max(20, last // 1000 + 10)

    def go(p: FaultPlan, d: str):
        return _drive_failover(p, scenario, rate, seed, duration_s, drain_s, reliable, settings, d)

    with tempfile.TemporaryDirectory() as tmp:
        base = workdir or tmp
        rig, rows, events = go(plan, f"{base}/run")
        verdict = Verdict()
        observed = rig.archive.message_ids() if rig.archive else []
        verdict.checks.append(_delivery_check(rig.sent, observed, reliable))
        for ev in events:
            if ev["event"] == "kill_worker":
                verdict.checks.append(_worker_check(rig, ev))
            elif ev["event"] == "kill_driver":
                verdict.checks.append(_driver_check(rig, rows, ev, reliable))
        if any(e.kind == "kill_master" for _, e in plan.events):
            twin_plan = FaultPlan([(t, e) for t, e in plan.events if e.kind != "kill_master"])
            twin, _, _ = go(twin_plan, f"{base}/twin")
            same = _batch_signature(twin) == _batch_signature(rig)
            verdict.checks.append(Check("master_kill_no_effect", same,
                                        "per-batch stats identical to the twin run" if same
                                        else "per-batch stats differ from the twin run"))
        metrics = rig.cluster.metrics_snapshot()
    return FailoverResult(RunReport(rows), verdict, metrics, rig.sent, observed, events)


def _delivery_check(sent: list[str], observed: list[str], reliable: bool) -> Check:
    dupes = len(observed) - len(set(observed))
    missing = len(set(sent) - set(observed))
    stray = len(set(observed) - set(sent))
    detail = f"sent={len(sent)} observed={len(observed)} duplicates={dupes} lost={missing}"
    if reliable:
        return Check("exactly_once", dupes == 0 and missing == 0 and stray == 0, detail)
    return Check("at_most_once", dupes == 0 and stray == 0, detail)


def _worker_check(rig: Rig, ev: dict) -> Check:
    delta = ev["recomputed_delta"]
    if ev.get("active") is None or not ev.get("active_hit"):
        return Check("worker_kill_idle", delta == 0,
                     f"no running batch used {ev['node']}; recomputed stages +{delta}")
    ssc = rig.app.incarnations[ev["incarnation"]]
    done = [b for b in ssc.completed if b.batch_id == ev["active"]]
    if not done or not ev["baseline"]:
        return Check("worker_kill_spike", False,
                     f"batch {ev['active']} never completed or no baseline batches")
    median = statistics.median(ev["baseline"])
    took = done[0].processing_ms
    ok = took >= SPIKE_FACTOR * median and delta >= 1
    return Check("worker_kill_spike", ok,
                 f"batch {ev['active']} took {took:.1f} ms vs median {median:.1f} ms; "
                 f"recomputed stages +{delta}")


def _driver_check(rig: Rig, rows: list[ReportRow], ev: dict, reliable: bool) -> Check:
    restart = ev.get("restart_at")
    if restart is None:
        return Check("driver_restart", False, "no live master: driver lost supervision")
    kill = ev["t_ms"]
    gap = [r for r in rows if r.ts - 1000 >= kill and r.ts <= restart]
    gap_ok = bool(gap) and all(r.processed == 0 and r.received == 0 for r in gap)
    burst = [r for r in rows if restart <= r.ts <= restart + 3000]
    peak = max((r.received for r in burst), default=0)
    burst_ok = peak > ev["target_rate"]
    processed = sum(r.processed for r in rows)
    conserved = processed == len(rig.sent) if reliable else processed <= len(rig.sent)
    return Check("driver_kill_gap_burst", gap_ok and burst_ok and conserved,
                 f"{len(gap)} idle seconds, peak received {peak} vs target {ev['target_rate']}, "
                 f"processed {processed} of {len(rig.sent)} sent")
