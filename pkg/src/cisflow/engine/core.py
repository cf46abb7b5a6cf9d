"""Partitioned, lazily evaluated datasets with lineage-based recovery.

A :class:`Context` plays the driver role.  Datasets only describe how their
partitions are derived; nothing runs until an action asks for results, at
which point the lineage is cut into stages at every wide dependency and the
stages are executed task by task on the slots offered by a backend.
"""

from __future__ import annotations

import enum
import itertools
import operator
import pickle
import threading
import types
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence


class EngineError(Exception):
    pass


class ZeroPartitions(EngineError, ValueError):
    pass


class NotKeyed(EngineError, TypeError):
    pass


class IndexOutOfRange(EngineError, IndexError):
    pass


class WorkerReadForbidden(EngineError):
    pass


class TaskLost(EngineError):
    """A task attempt died together with its executor; the attempt is retried."""


class TaskFailed(EngineError):
    pass


class Dependency(enum.Enum):
    NARROW = "narrow"
    WIDE = "wide"


WIDE_KINDS = frozenset({"reduce_by_key", "group_by_key", "join"})
NARROW_KINDS = frozenset(
    {"map", "filter", "flat_map", "map_partitions", "union", "zip_partitions"}
)


def dependency_of(kind: str) -> Optional[Dependency]:
    if kind in WIDE_KINDS:
        return Dependency.WIDE
    if kind in NARROW_KINDS:
        return Dependency.NARROW
    return None


def portable_hash(key: Any) -> int:
    # builtin hash() of str is salted per process; reports must be byte-stable
    if key is None:
        return 0
    if isinstance(key, bool):
        return int(key)
    if isinstance(key, int):
        return key & 0x7FFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, bytes):
        return zlib.crc32(key)
    if isinstance(key, tuple):
        h = 0x345678
        for item in key:
            h = (h * 1000003) ^ portable_hash(item)
        return h & 0x7FFFFFFF
    return zlib.crc32(repr(key).encode("utf-8"))


class HashPartitioner:
    def __init__(self, num_partitions: int):
        if num_partitions < 1:
            raise ZeroPartitions("partitioner needs at least one partition")
        self.num_partitions = num_partitions

    def __call__(self, key: Any) -> int:
        return portable_hash(key) % self.num_partitions

    def __eq__(self, other: object) -> bool:
        return isinstance(other, HashPartitioner) and other.num_partitions == self.num_partitions

    def __hash__(self) -> int:
        return hash(("hash", self.num_partitions))

    def __repr__(self) -> str:
        return f"HashPartitioner({self.num_partitions})"


def chunk(items: Sequence[Any], num_partitions: int) -> tuple[tuple, ...]:
    """Contiguous split; the first ``len % n`` partitions get one extra item."""
    if num_partitions < 1:
        raise ZeroPartitions(f"num_partitions must be >= 1, got {num_partitions}")
    items = list(items)
    base, extra = divmod(len(items), num_partitions)
    out, start = [], 0
    for i in range(num_partitions):
        size = base + (1 if i < extra else 0)
        out.append(tuple(items[start:start + size]))
        start += size
    return tuple(out)


def _fn_id(fn: Optional[Callable]) -> str:
    if fn is None:
        return "-"
    return getattr(fn, "__qualname__", None) or repr(fn)


@dataclass(frozen=True)
class SourceDescriptor:
    chunks: tuple[tuple, ...]


@dataclass(frozen=True)
class TransformDescriptor:
    kind: str
    fn_id: str
    parent_ids: tuple[int, ...]

    @property
    def dependency(self) -> Dependency:
        return dependency_of(self.kind)


@dataclass(frozen=True)
class Stage:
    stage_id: int
    output_id: int
    pipeline: tuple[int, ...]
    parent_ids: tuple[int, ...]
    boundary: str  # "shuffle" or "result"
    shuffle_dep: Optional[tuple[int, int]]
    partitions: tuple[int, ...]


@dataclass
class TaskRun:
    stage_id: int
    partition: int
    worker: str
    slot: int
    attempts: int
    cost_ms: float
    recomputed: bool
    recovered: bool = False


@dataclass
class StageRun:
    stage: Stage
    tasks: list[TaskRun] = field(default_factory=list)

    @property
    def recomputed(self) -> bool:
        return any(t.recomputed for t in self.tasks)

    @property
    def recovered(self) -> bool:
        """True when a task rebuilt a persisted block that had been lost."""
        return any(t.recovered for t in self.tasks)

    def makespan_ms(self) -> float:
        per_slot: dict[tuple[str, int], float] = {}
        for t in self.tasks:
            k = (t.worker, t.slot)
            per_slot[k] = per_slot.get(k, 0.0) + t.cost_ms
        return max(per_slot.values(), default=0.0)


@dataclass
class JobRun:
    job_id: int
    stages: list[StageRun] = field(default_factory=list)

    @property
    def duration_ms(self) -> float:
        return sum(s.makespan_ms() for s in self.stages)

    @property
    def recomputed_stages(self) -> int:
        return sum(1 for s in self.stages if s.recomputed)

    @property
    def recovered_stages(self) -> int:
        return sum(1 for s in self.stages if s.recovered)

    def workers(self) -> set[str]:
        return {t.worker for s in self.stages for t in s.tasks}


@dataclass
class TaskMetrics:
    tasks_executed: int = 0
    task_failures: int = 0
    partitions_recomputed: int = 0
    shuffles: int = 0
    stages_run: int = 0
    stages_recomputed: int = 0
    evaluations: dict[int, int] = field(default_factory=dict)

    def evaluations_of(self, *datasets: "Dataset") -> int:
        return sum(self.evaluations.get(d.id, 0) for d in datasets)

    def copy(self) -> "TaskMetrics":
        return TaskMetrics(
            self.tasks_executed, self.task_failures, self.partitions_recomputed,
            self.shuffles, self.stages_run, self.stages_recomputed, dict(self.evaluations),
        )


@dataclass
class CostModel:
    """Virtual task costs in milliseconds, used for simulated timing only."""

    task_overhead_ms: float = 0.5
    element_ms: float = 0.001
    shuffle_write_ms: float = 0.002
    shuffle_read_ms: float = 0.002


class TaskContext:
    def __init__(self, ctx: "Context", stage_id: int, partition: int, attempt: int,
                 worker: str, slot: int):
        self.ctx = ctx
        self.stage_id = stage_id
        self.partition = partition
        self.attempt = attempt
        self.worker = worker
        self.slot = slot
        self.charged_ms = 0.0
        self.acc_updates: dict[int, Any] = {}
        self.recomputed = False
        self.recovered = False

    def charge(self, ms: float) -> None:
        self.charged_ms += ms


_local = threading.local()


def current_task() -> Optional[TaskContext]:
    return getattr(_local, "task", None)


def charge(ms: float) -> None:
    """Add virtual cost to the running task (no-op on the driver)."""
    tc = current_task()
    if tc is not None:
        tc.charge(ms)


class LocalBackend:
    """Pool of worker slots.

    Slots can be reserved (a stream receiver pins one for its lifetime) and
    workers can be marked dead; tasks are only placed on live, unreserved
    slots.
    """

    def __init__(self, n_workers: int = 1, slots_per_worker: int = 2):
        self.n_workers = n_workers
        self.slots_per_worker = slots_per_worker
        self.dead: set[str] = set()
        self.reserved: dict[tuple[str, int], str] = {}

    def workers(self) -> list[str]:
        return [f"worker-{w}" for w in range(self.n_workers)]

    def live_workers(self) -> list[str]:
        return [w for w in self.workers() if w not in self.dead]

    def all_slots(self) -> list[tuple[str, int]]:
        return [(w, s) for w in self.live_workers() for s in range(self.slots_per_worker)]

    def processing_slots(self) -> list[tuple[str, int]]:
        return [slot for slot in self.all_slots() if slot not in self.reserved]

    def reserve_slot(self, owner: str) -> Optional[tuple[str, int]]:
        """Pin the last free slot to ``owner``; None when nothing is free."""
        free = self.processing_slots()
        if not free:
            return None
        slot = free[-1]
        self.reserved[slot] = owner
        return slot

    def release_slot(self, slot: tuple[str, int]) -> None:
        self.reserved.pop(slot, None)

    def kill_worker(self, worker: str) -> list[str]:
        """Mark ``worker`` dead; returns the owners of reservations it held."""
        self.dead.add(worker)
        owners = [o for (w, _), o in self.reserved.items() if w == worker]
        self.reserved = {k: o for k, o in self.reserved.items() if k[0] != worker}
        return owners

    def check_task(self, task: TaskContext) -> None:
        if task.worker in self.dead:
            raise TaskLost(f"{task.worker} is dead")


def _freeze(value: Any) -> Any:
    if isinstance(value, dict):
        return types.MappingProxyType({k: _freeze(v) for k, v in value.items()})
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, set):
        return frozenset(value)
    return value


class Broadcast:
    """Read-only value shipped once to each worker that uses it."""

    def __init__(self, ctx: "Context", broadcast_id: int, value: Any):
        self._ctx = ctx
        self.broadcast_id = broadcast_id
        self._value = value
        self._blob = pickle.dumps(value, protocol=pickle.HIGHEST_PROTOCOL)

    @property
    def value(self) -> Any:
        tc = current_task()
        if tc is None:
            return self._value
        return self._ctx._resolve_broadcast(self, tc.worker)


class Accumulator:
    """Add-only shared variable; only the driver may read the total."""

    def __init__(self, ctx: "Context", accumulator_id: int, zero: Any,
                 merge: Callable[[Any, Any], Any]):
        self._ctx = ctx
        self.accumulator_id = accumulator_id
        self.merge = merge
        self._total = zero

    def add(self, delta: Any) -> None:
        tc = current_task()
        if tc is None:
            self._total = self.merge(self._total, delta)
            return
        if self.accumulator_id in tc.acc_updates:
            tc.acc_updates[self.accumulator_id] = self.merge(
                tc.acc_updates[self.accumulator_id], delta)
        else:
            tc.acc_updates[self.accumulator_id] = delta

    @property
    def value(self) -> Any:
        if current_task() is not None:
            raise WorkerReadForbidden("accumulator values are readable on the driver only")
        return self._total

    def _merge_partial(self, partial: Any) -> None:
        self._total = self.merge(self._total, partial)


class Dataset:
    """Immutable partitioned collection described by its lineage."""

    def __init__(self, ctx: "Context", num_partitions: int, origin, parents=(),
                 fn: Optional[Callable] = None, partitioner: Optional[Callable] = None,
                 cost: Optional[float] = None, name: Optional[str] = None):
        if num_partitions < 1:
            raise ZeroPartitions(f"num_partitions must be >= 1, got {num_partitions}")
        self.ctx = ctx
        self.id = next(ctx._ids)
        self.num_partitions = num_partitions
        self.origin = origin
        self.parents: tuple[Dataset, ...] = tuple(parents)
        self._fn = fn
        self.partitioner = partitioner
        self.cost = ctx.cost_model.element_ms if cost is None else cost
        self.name = name or (origin.kind if isinstance(origin, TransformDescriptor) else "source")
        self.persisted = False
        self._cache: dict[int, tuple[tuple, str]] = {}

    def __repr__(self) -> str:
        return f"<Dataset {self.id} {self.name} p={self.num_partitions}>"

    @property
    def kind(self) -> str:
        return self.origin.kind if isinstance(self.origin, TransformDescriptor) else "source"

    @property
    def dependency(self) -> Optional[Dependency]:
        return dependency_of(self.kind)

    # -- narrow transforms -------------------------------------------------

    def _narrow(self, kind, fn, parents, num_partitions=None, cost=None,
                partitioner=None, name=None) -> "Dataset":
        origin = TransformDescriptor(kind, _fn_id(fn), tuple(p.id for p in parents))
        return Dataset(self.ctx, num_partitions or self.num_partitions, origin, parents,
                       fn=fn, partitioner=partitioner, cost=cost, name=name)

    def map(self, fn: Callable, *, cost: Optional[float] = None, name=None) -> "Dataset":
        return self._narrow("map", fn, (self,), cost=cost, name=name)

    def filter(self, fn: Callable, *, cost: Optional[float] = None, name=None) -> "Dataset":
        return self._narrow("filter", fn, (self,), cost=cost,
                            partitioner=self.partitioner, name=name)

    def flat_map(self, fn: Callable, *, cost: Optional[float] = None, name=None) -> "Dataset":
        return self._narrow("flat_map", fn, (self,), cost=cost, name=name)

    def map_partitions(self, fn: Callable[[list], Iterable], *, cost=None,
                       preserves_partitioning: bool = False, name=None) -> "Dataset":
        part = self.partitioner if preserves_partitioning else None
        return self._narrow("map_partitions", fn, (self,), cost=cost, partitioner=part, name=name)

    def union(self, *others: "Dataset") -> "Dataset":
        parents = (self,) + others
        total = sum(p.num_partitions for p in parents)
        return self._narrow("union", None, parents, num_partitions=total)

    def zip_partitions(self, other: "Dataset", fn: Callable[[list, list], Iterable], *,
                       cost=None, name=None) -> "Dataset":
        """Combine co-partitioned datasets partition by partition (no shuffle)."""
        if other.num_partitions != self.num_partitions:
            raise ValueError("zip_partitions needs equal partition counts")
        return self._narrow("zip_partitions", fn, (self, other), cost=cost,
                            partitioner=self.partitioner, name=name)

    # -- wide transforms ---------------------------------------------------

    def _wide(self, kind, fn, parents, num_partitions, partitioner, cost, name) -> "Dataset":
        n = num_partitions or getattr(partitioner, "num_partitions", None) or self.num_partitions
        part = partitioner or HashPartitioner(n)
        origin = TransformDescriptor(kind, _fn_id(fn), tuple(p.id for p in parents))
        if cost is None:
            cost = self.ctx.cost_model.shuffle_read_ms
        return Dataset(self.ctx, n, origin, parents, fn=fn, partitioner=part,
                       cost=cost, name=name)

    def reduce_by_key(self, fn: Callable[[Any, Any], Any], num_partitions=None,
                      partitioner=None, *, cost=None, name=None) -> "Dataset":
        return self._wide("reduce_by_key", fn, (self,), num_partitions, partitioner, cost, name)

    def group_by_key(self, num_partitions=None, partitioner=None, *, cost=None,
                     name=None) -> "Dataset":
        return self._wide("group_by_key", None, (self,), num_partitions, partitioner, cost, name)

    def join(self, other: "Dataset", num_partitions=None, partitioner=None, *, cost=None,
             name=None) -> "Dataset":
        return self._wide("join", None, (self, other), num_partitions, partitioner, cost, name)

    # -- persistence -------------------------------------------------------

    def persist(self) -> "Dataset":
        self.persisted = True
        return self

    cache = persist

    def unpersist(self) -> "Dataset":
        self.persisted = False
        self._cache.clear()
        return self

    @property
    def cached_partitions(self) -> list[int]:
        return sorted(self._cache)

    def is_materialized(self) -> bool:
        return len(self._cache) == self.num_partitions

    def drop_cached_partition(self, pidx: int) -> None:
        if self._cache.pop(pidx, None) is not None:
            self.ctx._lost.add((self.id, pidx))

    # -- actions -----------------------------------------------------------

    def collect(self) -> list:
        parts = self.ctx.run_job(self, list)
        return [x for part in parts for x in part]

    def collect_partitions(self) -> list[list]:
        return self.ctx.run_job(self, list)

    def count(self) -> int:
        return sum(self.ctx.run_job(self, lambda it: sum(1 for _ in it)))

    def foreach(self, fn: Callable[[Any], None]) -> None:
        def consume(it):
            for x in it:
                fn(x)
            return None
        self.ctx.run_job(self, consume)

    def recompute_partition(self, pidx: int) -> list:
        return recompute_partition(self, pidx)

    def lineage(self) -> list["Dataset"]:
        """All ancestors including self, in creation (topological) order."""
        seen: dict[int, Dataset] = {}
        stack = [self]
        while stack:
            d = stack.pop()
            if d.id in seen:
                continue
            seen[d.id] = d
            stack.extend(d.parents)
        return [seen[k] for k in sorted(seen)]


class Context:
    """Driver-side entry point: creates datasets and schedules their jobs."""

    def __init__(self, backend=None, *, max_attempts: int = 3,
                 cost_model: Optional[CostModel] = None, executor=None):
        self.backend = backend or LocalBackend()
        self.max_attempts = max_attempts
        self.cost_model = cost_model or CostModel()
        self.executor = executor
        self.metrics = TaskMetrics()
        self.jobs: list[JobRun] = []
        self._ids = itertools.count()
        self._bc_ids = itertools.count()
        self._acc_ids = itertools.count()
        self._job_ids = itertools.count()
        self._accumulators: dict[int, Accumulator] = {}
        self._broadcast_copies: dict[tuple[str, int], Any] = {}
        self.broadcast_resolutions: dict[tuple[str, int], int] = {}
        self._evaluated: set[tuple[int, int]] = set()
        self._lost: set[tuple[int, int]] = set()
        self._lock = threading.Lock()

    # -- creation ----------------------------------------------------------

    def parallelize(self, items: Sequence[Any], num_partitions: int = 2, *,
                    cost: Optional[float] = None, name: str = "source") -> Dataset:
        chunks = chunk(items, num_partitions)
        return Dataset(self, num_partitions, SourceDescriptor(chunks), cost=cost, name=name)

    def from_partitions(self, partitions: Sequence[Sequence[Any]], *,
                        partitioner: Optional[Callable] = None, cost: Optional[float] = None,
                        name: str = "source") -> Dataset:
        """Source dataset with the given partition contents, kept as is."""
        chunks = tuple(tuple(p) for p in partitions)
        return Dataset(self, len(chunks), SourceDescriptor(chunks), partitioner=partitioner,
                       cost=cost, name=name)

    def broadcast(self, value: Any) -> Broadcast:
        return Broadcast(self, next(self._bc_ids), value)

    def accumulator(self, zero: Any = 0, merge: Callable = operator.add) -> Accumulator:
        acc = Accumulator(self, next(self._acc_ids), zero, merge)
        self._accumulators[acc.accumulator_id] = acc
        return acc

    def _resolve_broadcast(self, bc: Broadcast, worker: str) -> Any:
        key = (worker, bc.broadcast_id)
        with self._lock:
            if key not in self._broadcast_copies:
                self._broadcast_copies[key] = _freeze(pickle.loads(bc._blob))
                self.broadcast_resolutions[key] = self.broadcast_resolutions.get(key, 0) + 1
            return self._broadcast_copies[key]

    # -- failures ----------------------------------------------------------

    def drop_worker(self, worker: str, datasets: Iterable[Dataset]) -> int:
        """Forget every cached block and broadcast copy held by ``worker``."""
        lost = 0
        for ds in datasets:
            for p in [p for p, (_, w) in ds._cache.items() if w == worker]:
                del ds._cache[p]
                self._lost.add((ds.id, p))
                lost += 1
        for key in [k for k in self._broadcast_copies if k[0] == worker]:
            del self._broadcast_copies[key]
        return lost

    # -- planning ----------------------------------------------------------

    def build_stages(self, ds: Dataset) -> list[Stage]:
        return self._plan(ds, range(ds.num_partitions), None)

    def _plan(self, target: Dataset, parts, skip: Optional[Dataset]) -> list[Stage]:
        stages: list[Stage] = []
        shuffle_stages: dict[tuple[int, int], int] = {}

        def cached(ds: Dataset, p: int) -> bool:
            return ds is not skip and p in ds._cache

        def walk(ds: Dataset, needed: Iterable[int], members: set, parent_stages: list):
            missing = sorted({p for p in needed if not cached(ds, p)})
            members.add(ds.id)
            if not missing or isinstance(ds.origin, SourceDescriptor):
                return
            kind = ds.kind
            if kind in WIDE_KINDS:
                for i in range(len(ds.parents)):
                    sid = shuffle_stage(ds, i)
                    if sid not in parent_stages:
                        parent_stages.append(sid)
            elif kind == "union":
                offset = 0
                for parent in ds.parents:
                    local = [p - offset for p in missing
                             if offset <= p < offset + parent.num_partitions]
                    if local:
                        walk(parent, local, members, parent_stages)
                    offset += parent.num_partitions
            else:
                for parent in ds.parents:
                    walk(parent, missing, members, parent_stages)

        def shuffle_stage(wide: Dataset, idx: int) -> int:
            key = (wide.id, idx)
            if key in shuffle_stages:
                return shuffle_stages[key]
            parent = wide.parents[idx]
            members: set = set()
            parent_stages: list = []
            walk(parent, range(parent.num_partitions), members, parent_stages)
            sid = len(stages)
            stages.append(Stage(sid, parent.id, tuple(sorted(members)), tuple(parent_stages),
                                "shuffle", key, tuple(range(parent.num_partitions))))
            shuffle_stages[key] = sid
            return sid

        members: set = set()
        parent_stages: list = []
        parts = tuple(parts)
        walk(target, parts, members, parent_stages)
        stages.append(Stage(len(stages), target.id, tuple(sorted(members)),
                            tuple(parent_stages), "result", None, parts))
        return stages

    # -- execution ---------------------------------------------------------

    def run_job(self, ds: Dataset, func: Callable[[Iterable], Any],
                partitions: Optional[Sequence[int]] = None, *,
                recompute: bool = False) -> list:
        parts = list(range(ds.num_partitions)) if partitions is None else list(partitions)
        for p in parts:
            if not 0 <= p < ds.num_partitions:
                raise IndexOutOfRange(f"partition {p} not in [0, {ds.num_partitions})")
        skip = ds if recompute else None
        plan = self._plan(ds, parts, skip)
        by_id = {d.id: d for d in ds.lineage()}
        job = JobRun(next(self._job_ids))
        shuffle_store: dict[tuple[int, int], list[list]] = {}
        results: list = []
        for stage in plan:
            out = by_id[stage.output_id]
            run = StageRun(stage)
            if stage.boundary == "shuffle":
                wide = by_id[stage.shuffle_dep[0]]
                part_fn = wide.partitioner
                n_out = wide.num_partitions
                write_cost = self.cost_model.shuffle_write_ms

                def task_fn(tc, p, out=out, part_fn=part_fn, n_out=n_out, write_cost=write_cost):
                    data = self._compute(out, p, tc, shuffle_store, skip)
                    buckets: list[list] = [[] for _ in range(n_out)]
                    for rec in data:
                        if not isinstance(rec, tuple) or len(rec) != 2:
                            raise NotKeyed(f"expected (key, value) pairs, got {rec!r}")
                        buckets[part_fn(rec[0])].append(rec)
                    tc.charge(len(data) * write_cost)
                    return buckets

                outputs = self._run_stage(stage, run, task_fn)
                merged: list[list] = [[] for _ in range(n_out)]
                for buckets in outputs:
                    for i, b in enumerate(buckets):
                        merged[i].extend(b)
                shuffle_store[stage.shuffle_dep] = merged
                with self._lock:
                    self.metrics.shuffles += 1
            else:
                def task_fn(tc, p, out=out):
                    return func(iter(self._compute(out, p, tc, shuffle_store, skip)))

                results = self._run_stage(stage, run, task_fn)
            job.stages.append(run)
            with self._lock:
                self.metrics.stages_run += 1
                if run.recomputed:
                    self.metrics.stages_recomputed += 1
        self.jobs.append(job)
        self.last_job = job
        return results

    def _run_stage(self, stage: Stage, run: StageRun, task_fn) -> list:
        parts = stage.partitions

        def attempt_loop(i: int, p: int):
            last_error: Optional[BaseException] = None
            for attempt in range(self.max_attempts):
                slots = self.backend.processing_slots()
                if not slots:
                    raise TaskFailed("no live executor slots")
                worker, slot = slots[(i + attempt) % len(slots)]
                tc = TaskContext(self, stage.stage_id, p, attempt, worker, slot)
                _local.task = tc
                try:
                    self.backend.check_task(tc)
                    value = task_fn(tc, p)
                    self.backend.check_task(tc)
                except TaskLost as exc:
                    last_error = exc
                    with self._lock:
                        self.metrics.task_failures += 1
                    continue
                except Exception as exc:  # deterministic user errors still use the budget
                    last_error = exc
                    with self._lock:
                        self.metrics.task_failures += 1
                    continue
                finally:
                    _local.task = None
                return tc, value
            if isinstance(last_error, TaskLost):
                raise TaskFailed(f"task {stage.stage_id}.{p} lost {self.max_attempts} times") \
                    from last_error
            raise last_error

        if self.executor is not None and len(parts) > 1:
            futures = [self.executor.submit(attempt_loop, i, p) for i, p in enumerate(parts)]
            done = [f.result() for f in futures]
        else:
            done = [attempt_loop(i, p) for i, p in enumerate(parts)]

        values = []
        for p, (tc, value) in zip(parts, done):
            # accumulator partials merge on the driver, only for the winning attempt
            for acc_id, partial in tc.acc_updates.items():
                self._accumulators[acc_id]._merge_partial(partial)
            run.tasks.append(TaskRun(stage.stage_id, p, tc.worker, tc.slot, tc.attempt + 1,
                                     self.cost_model.task_overhead_ms + tc.charged_ms,
                                     tc.recomputed, tc.recovered))
            self.metrics.tasks_executed += 1
            values.append(value)
        return values

    def _compute(self, ds: Dataset, p: int, tc: TaskContext, shuffle_store, skip) -> list:
        if ds is not skip and p in ds._cache:
            return list(ds._cache[p][0])
        origin = ds.origin
        if isinstance(origin, SourceDescriptor):
            data = list(origin.chunks[p])
        else:
            kind = origin.kind
            fn = ds._fn
            if kind == "map":
                data = [fn(x) for x in self._compute(ds.parents[0], p, tc, shuffle_store, skip)]
            elif kind == "filter":
                data = [x for x in self._compute(ds.parents[0], p, tc, shuffle_store, skip)
                        if fn(x)]
            elif kind == "flat_map":
                data = [y for x in self._compute(ds.parents[0], p, tc, shuffle_store, skip)
                        for y in fn(x)]
            elif kind == "map_partitions":
                data = list(fn(self._compute(ds.parents[0], p, tc, shuffle_store, skip)))
            elif kind == "zip_partitions":
                left = self._compute(ds.parents[0], p, tc, shuffle_store, skip)
                right = self._compute(ds.parents[1], p, tc, shuffle_store, skip)
                data = list(fn(left, right))
            elif kind == "union":
                offset = 0
                for parent in ds.parents:
                    if p < offset + parent.num_partitions:
                        data = self._compute(parent, p - offset, tc, shuffle_store, skip)
                        break
                    offset += parent.num_partitions
            elif kind in WIDE_KINDS:
                data = self._combine(ds, [shuffle_store[(ds.id, i)][p]
                                          for i in range(len(ds.parents))])
            else:  # pragma: no cover - descriptor kinds are closed
                raise EngineError(f"unknown transform {kind}")
        tc.charge(len(data) * ds.cost)
        with self._lock:
            self.metrics.evaluations[ds.id] = self.metrics.evaluations.get(ds.id, 0) + 1
            if (ds.id, p) in self._evaluated:
                self.metrics.partitions_recomputed += 1
                tc.recomputed = True
            else:
                self._evaluated.add((ds.id, p))
            if (ds.id, p) in self._lost:
                tc.recovered = True
        if ds.persisted:
            ds._cache[p] = (tuple(data), tc.worker)
            with self._lock:
                self._lost.discard((ds.id, p))
        return data

    @staticmethod
    def _combine(ds: Dataset, buckets: list[list]) -> list:
        kind = ds.kind
        if kind == "reduce_by_key":
            acc: dict = {}
            for k, v in buckets[0]:
                acc[k] = ds._fn(acc[k], v) if k in acc else v
            return list(acc.items())
        if kind == "group_by_key":
            groups: dict = {}
            for k, v in buckets[0]:
                groups.setdefault(k, []).append(v)
            return list(groups.items())
        right: dict = {}
        for k, w in buckets[1]:
            right.setdefault(k, []).append(w)
        return [(k, (v, w)) for k, v in buckets[0] for w in right.get(k, ())]


def build_stages(ds: Dataset) -> list[Stage]:
    return ds.ctx.build_stages(ds)


def recompute_partition(ds: Dataset, pidx: int) -> list:
    """Re-derive one partition from lineage, stopping at cached ancestors."""
    if not 0 <= pidx < ds.num_partitions:
        raise IndexOutOfRange(f"partition {pidx} not in [0, {ds.num_partitions})")
    return ds.ctx.run_job(ds, list, [pidx], recompute=True)[0]


def wide_dependency_count(stages: list[Stage]) -> int:
    return sum(1 for s in stages if s.boundary == "shuffle")
