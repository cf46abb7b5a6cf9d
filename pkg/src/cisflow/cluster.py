"""Deterministic driver/master/worker topology with crash-stop fault injection.

Masters elect the lowest live id as leader.  An application's driver is
supervised by the leading master: when the driver dies and any master is
alive, a new driver is launched after ``driver_restart_ms`` and recovers from
the latest checkpoint plus the write-ahead log.  Workers host executor slots;
killing one makes its slots, cached blocks and receivers disappear.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .engine.core import Context, CostModel, LocalBackend
from .engine.stream import BatchStats, StreamingContext

DRIVER_RESTART_MS = 3_000


class ClusterError(Exception):
    pass


class InsufficientSlots(ClusterError):
    pass


class AlreadyDead(ClusterError):
    pass


class UnknownNode(ClusterError, KeyError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    n_workers: int = 3
    slots_per_worker: int = 2
    n_masters: int = 3
    replication_factor: int = 2
    seed: int = 0
    driver_restart_ms: int = DRIVER_RESTART_MS
    link_delay_ms: int = 0

    def __post_init__(self):
        if self.n_workers < 1 or self.slots_per_worker < 1:
            raise ValueError("a cluster needs at least one worker slot")
        if self.n_masters < 1:
            raise ValueError("a cluster needs at least one master")

    @property
    def total_slots(self) -> int:
        return self.n_workers * self.slots_per_worker


@dataclass
class SimNode:
    node_id: str
    role: str  # "master", "worker" or "driver"
    alive: bool = True
    leader: bool = False


@dataclass(frozen=True)
class FaultEvent:
    kind: str  # "kill_worker", "kill_master" or "kill_driver"
    node: Optional[str] = None

    @staticmethod
    def parse(event: str, node: Optional[str]) -> "FaultEvent":
        kind = {"kill_worker": "kill_worker", "killworker": "kill_worker",
                "kill_master": "kill_master", "killmaster": "kill_master",
                "kill_driver": "kill_driver", "killdriver": "kill_driver"}.get(
            event.lower().replace("-", "_"))
        if kind is None:
            raise ValueError(f"unknown fault event {event!r}")
        if kind != "kill_driver" and not node:
            raise ValueError(f"{event} needs a target node")
        return FaultEvent(kind, node if kind != "kill_driver" else "driver")


@dataclass
class FaultPlan:
    events: list[tuple[int, FaultEvent]] = field(default_factory=list)

    def __post_init__(self):
        times = [t for t, _ in self.events]
        if times != sorted(times):
            raise ValueError("fault plan times must be non-decreasing")

    @classmethod
    def from_json(cls, items: list[dict]) -> "FaultPlan":
        events = [(int(it["t_ms"]), FaultEvent.parse(it["event"], it.get("node")))
                  for it in items]
        return cls(events)


@dataclass
class ClusterMetrics:
    batches: list[BatchStats]
    recomputed_stages: int
    driver_restarts: int
    leader_elections: int
    supervision_lost: bool
    leader: Optional[str]


class ExecutorBackend(LocalBackend):
    """The slots granted to one application, filtered by worker liveness."""

    def __init__(self, cluster: "Cluster", slots: list[tuple[str, int]]):
        super().__init__(cluster.cfg.n_workers, cluster.cfg.slots_per_worker)
        self.dead = cluster.dead_workers  # shared with the cluster
        self.granted = list(slots)

    def workers(self) -> list[str]:
        seen: list[str] = []
        for w, _ in self.granted:
            if w not in seen:
                seen.append(w)
        return seen

    def all_slots(self) -> list[tuple[str, int]]:
        return [s for s in self.granted if s[0] not in self.dead]


@dataclass
class AppHandle:
    name: str
    factory: Callable[[Context], StreamingContext]
    backend: ExecutorBackend
    receivers: int
    ssc: Optional[StreamingContext] = None
    incarnations: list = field(default_factory=list)
    restart_at: Optional[int] = None
    driver_alive: bool = True

    def all_batches(self) -> list[BatchStats]:
        return [b for ssc in self.incarnations for b in ssc.completed]


class Cluster:
    def __init__(self, cfg: ClusterConfig, clock=None, cost_model: Optional[CostModel] = None):
        self.cfg = cfg
        self.clock = clock
        self.cost_model = cost_model
        self.rng = random.Random(cfg.seed)
        self.masters = [SimNode(f"master-{i}", "master") for i in range(cfg.n_masters)]
        self.workers = [SimNode(f"worker-{i}", "worker") for i in range(cfg.n_workers)]
        self.dead_workers: set[str] = set()
        self.apps: list[AppHandle] = []
        self.leader_elections = 0
        self.driver_restarts = 0
        self.supervision_lost = False
        self.trace: list[tuple[int, str]] = []
        self.now = 0
        self._elect(initial=True)

    # -- topology ----------------------------------------------------------

    @property
    def leader(self) -> Optional[str]:
        for m in self.masters:
            if m.leader:
                return m.node_id
        return None

    def _elect(self, initial: bool = False) -> None:
        for m in self.masters:
            m.leader = False
        alive = [m for m in self.masters if m.alive]
        if alive:
            alive[0].leader = True
            if not initial:
                self.leader_elections += 1
                self.trace.append((self.now, f"elected {alive[0].node_id}"))

    def node(self, node_id: str) -> SimNode:
        for n in self.masters + self.workers:
            if n.node_id == node_id:
                return n
        raise UnknownNode(node_id)

    def free_slots(self) -> list[tuple[str, int]]:
        taken = {s for app in self.apps for s in app.backend.granted}
        return [(w.node_id, s) for w in self.workers if w.alive
                for s in range(self.cfg.slots_per_worker) if (w.node_id, s) not in taken]

    # -- applications ------------------------------------------------------

    def submit_application(self, factory: Callable[[Context], StreamingContext], *,
                           receivers: int = 1, cores: Optional[int] = None,
                           name: Optional[str] = None, now: int = 0) -> AppHandle:
        if self.leader is None:
            raise ClusterError("no live master accepts submissions")
        free = self.free_slots()
        want = len(free) if cores is None else cores
        if want < receivers + 1 or len(free) < want:
            raise InsufficientSlots(f"application needs {receivers + 1} slots "
                                    f"({want} requested), {len(free)} free")
        backend = ExecutorBackend(self, free[:want])
        app = AppHandle(name or f"app-{len(self.apps)}", factory, backend, receivers)
        self.apps.append(app)
        self.now = now
        self._launch(app, now, recover=False)
        return app

    def _launch(self, app: AppHandle, now: int, recover: bool) -> None:
        ctx = Context(app.backend, cost_model=self.cost_model)
        ssc = app.factory(ctx)
        ssc.replication_factor = min(ssc.replication_factor, self.cfg.replication_factor)
        ssc.start(now, recover=recover)
        app.ssc = ssc
        app.incarnations.append(ssc)
        app.driver_alive = True
        app.restart_at = None
        self.trace.append((now, f"driver of {app.name} {'restarted' if recover else 'started'}"))

    # -- time --------------------------------------------------------------

    def advance(self, t: int) -> None:
        for app in self.apps:
            if not app.driver_alive and app.restart_at is not None and app.restart_at <= t:
                self._launch(app, app.restart_at, recover=True)
                self.driver_restarts += 1
            if app.driver_alive:
                app.ssc.advance(t)
        self.now = t

    # -- faults ------------------------------------------------------------

    def inject_fault(self, event: FaultEvent, now: Optional[int] = None) -> None:
        if now is not None:
            self.advance(now)
        t = self.now
        if event.kind == "kill_worker":
            node = self.node(event.node)
            if not node.alive:
                raise AlreadyDead(event.node)
            node.alive = False
            self.dead_workers.add(node.node_id)
            self.trace.append((t, f"killed {node.node_id}"))
            for app in self.apps:
                app.backend.kill_worker(node.node_id)
                if app.driver_alive:
                    info = app.ssc.on_worker_lost(node.node_id, t)
                    self.trace.append((t, f"{app.name} re-executed "
                                          f"{info['reexecuted_stages']} stages"))
        elif event.kind == "kill_master":
            node = self.node(event.node)
            if not node.alive:
                raise AlreadyDead(event.node)
            node.alive = False
            was_leader = node.leader
            self.trace.append((t, f"killed {node.node_id}"))
            if was_leader:
                self._elect()
        elif event.kind == "kill_driver":
            live = [a for a in self.apps if a.driver_alive]
            if not live:
                raise AlreadyDead("driver")
            for app in live:
                app.ssc.crash()
                app.driver_alive = False
                self.trace.append((t, f"killed driver of {app.name}"))
                if self.leader is not None:
                    delay = self.cfg.driver_restart_ms
                    if self.cfg.link_delay_ms:
                        delay += self.rng.randint(0, self.cfg.link_delay_ms)
                    app.restart_at = t + delay
                else:
                    # only a master reacts to a dead driver
                    self.supervision_lost = True
                    self.trace.append((t, f"{app.name} lost supervision"))
        else:
            raise ValueError(f"unknown fault {event.kind}")

    # -- metrics -----------------------------------------------------------

    def metrics_snapshot(self) -> ClusterMetrics:
        batches: list[BatchStats] = []
        recomputed = 0
        for app in self.apps:
            batches.extend(BatchStats(**vars(b)) for b in app.all_batches())
            for ssc in app.incarnations:
                recomputed += ssc.recomputed_stages
            if app.driver_alive and app.ssc._running is not None:
                recomputed += app.ssc._running.recomputed_stages
        return ClusterMetrics(batches, recomputed, self.driver_restarts, self.leader_elections,
                              self.supervision_lost, self.leader)


def start_cluster(cfg: ClusterConfig, clock=None, cost_model: Optional[CostModel] = None) -> Cluster:
    return Cluster(cfg, clock, cost_model)
