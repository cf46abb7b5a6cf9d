"""Micro-batch streams on top of the dataset engine.

Time is virtual.  Receivers poll a broker at every block boundary, store what
they got (write-ahead log first, then replicas, then the broker ack) and every
batch interval the received blocks are sealed into one batch.  Batches run
strictly one after another: a batch is evaluated when it starts, its virtual
duration comes from the cost model, and its state becomes visible when it
completes.  A batch that is sealed while another one runs waits in a queue;
the queue length is the waiting-batch metric.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from .core import Context, Dataset, EngineError, HashPartitioner
from .durable import (
    CheckpointImage,
    CheckpointWriteFailed,
    WriteAheadLog,
    latest_checkpoint,
    read_checkpoint,
    write_checkpoint,
)

MIN_INTERVAL_MS = 100
MAX_INTERVAL_MS = 10_000
BLOCK_INTERVAL_MS = 200
DEFAULT_CHECKPOINT_MS = 10_000
DEFAULT_REPLICATION = 2
EXECUTOR_LOSS_TIMEOUT_MS = 5_000
BATCH_OVERHEAD_MS = 5.0


class StreamError(EngineError):
    pass


class IntervalOutOfRange(StreamError, ValueError):
    pass


class NoFreeCore(StreamError):
    pass


class IntervalMismatch(StreamError, ValueError):
    pass


class InvalidWindow(StreamError, ValueError):
    pass


class ReplicationFailed(StreamError):
    pass


class BatchFailed(StreamError):
    pass


class _Remove:
    def __repr__(self) -> str:
        return "REMOVE"


REMOVE = _Remove()


@dataclass(frozen=True)
class StreamRecord:
    message_id: str
    payload: bytes
    receive_ts: int


@dataclass(frozen=True)
class WindowSpec:
    window_length_ms: int
    slide_ms: int

    def validate(self, interval_ms: int) -> None:
        w, s = self.window_length_ms, self.slide_ms
        if w <= 0 or s <= 0:
            raise InvalidWindow(f"window {w} ms / slide {s} ms must be positive")
        if w % interval_ms or s % interval_ms:
            raise InvalidWindow(f"window {w} ms and slide {s} ms must be multiples "
                                f"of the {interval_ms} ms batch interval")


@dataclass(frozen=True)
class ReceiverSpec:
    broker: Any
    topic: str
    group: str = "stream"
    reliable: bool = True
    decode: Optional[Callable[[StreamRecord], Any]] = None
    name: Optional[str] = None


@dataclass
class BatchStats:
    batch_id: int
    batch_time_ms: int
    input_count: int
    processing_ms: float
    scheduling_delay_ms: float
    waiting_batches: int
    start_ms: float
    end_ms: float
    recomputed_stages: int = 0
    attempts: int = 1


@dataclass
class _Batch:
    batch_id: int
    time_ms: int
    sealed_ms: float
    wal_high_water: int
    input_count: int
    start_ms: Optional[float] = None
    end_ms: Optional[float] = None
    jobs: list = field(default_factory=list)
    recomputed_stages: int = 0
    attempts: int = 0
    image: Optional[CheckpointImage] = None


def _interval_check(interval_ms: int) -> None:
    if not MIN_INTERVAL_MS <= interval_ms <= MAX_INTERVAL_MS:
        raise IntervalOutOfRange(f"batch interval {interval_ms} ms outside "
                                 f"[{MIN_INTERVAL_MS}, {MAX_INTERVAL_MS}]")


class Receiver:
    """Runtime side of a :class:`ReceiverSpec`; pins one worker slot while up."""

    def __init__(self, ssc: "StreamingContext", spec: ReceiverSpec, name: str):
        self.ssc = ssc
        self.spec = spec
        self.name = name
        self.slot: Optional[tuple[str, int]] = None
        self.up_since = 0
        self.buffer: list = []
        self.stored = 0
        self.restarts = 0
        spec.broker.subscribe(spec.group, spec.topic)

    @property
    def alive(self) -> bool:
        return self.slot is not None

    def start(self, now: int) -> bool:
        slot = self.ssc.ctx.backend.reserve_slot(self.name)
        if slot is None:
            return False
        self.slot = slot
        self.up_since = now
        return True

    def stop(self) -> None:
        # anything consumed but not stored is gone; a reliable source redelivers it
        if self.slot is not None:
            self.ssc.ctx.backend.release_slot(self.slot)
        self.slot = None
        self.buffer = []

    def poll(self, now: int) -> None:
        broker = self.spec.broker
        while True:
            env = broker.consume(self.spec.group, self.spec.topic,
                                 auto_ack=not self.spec.reliable, published_by=now)
            if env is None:
                return
            if (env.redelivery_count == 0 and env.publish_ts >= self.up_since
                    and self.ssc.batch_of(env.publish_ts) >= self.ssc._next_batch):
                ts = env.publish_ts
            else:
                # backlog, redeliveries and stragglers for sealed batches arrive when picked up
                ts = now
            self.buffer.append((env, ts))

    def flush(self) -> None:
        if not self.buffer:
            return
        backend = self.ssc.ctx.backend
        live = backend.live_workers()
        rf = self.ssc.replication_factor
        if len(live) < rf:
            raise ReplicationFailed(f"{len(live)} live workers, replication needs {rf}")
        home = self.slot[0]
        replicas = [home] + [w for w in live if w != home][:rf - 1]
        wal = self.ssc.wal
        for env, ts in self.buffer:
            rec = StreamRecord(env.message_id, env.payload, ts)
            if wal is not None:
                wal.append(rec.message_id, rec.payload, ts, self.name)
            self.ssc._store_record(self.name, rec, replicas)
            if self.spec.reliable:
                self.spec.broker.ack(self.spec.group, env.delivery_id, self.spec.topic)
            self.stored += 1
        self.buffer = []


class MicroBatchStream:
    """A sequence of per-interval datasets described by an operator graph."""

    def __init__(self, ssc: "StreamingContext", kind: str, parents: Sequence["MicroBatchStream"] = (),
                 fn: Optional[Callable] = None, *, slide_ms: Optional[int] = None,
                 name: Optional[str] = None):
        self.ssc = ssc
        self.kind = kind
        self.parents = tuple(parents)
        self.fn = fn
        if slide_ms is None:
            slide_ms = self.parents[0].slide_ms if self.parents else ssc.batch_interval_ms
        self.slide_ms = slide_ms
        self.name = name or kind
        self.id = len(ssc._streams)
        ssc._streams.append(self)
        self._generated: dict[int, Optional[Dataset]] = {}

    @property
    def batch_interval_ms(self) -> int:
        return self.ssc.batch_interval_ms

    def __repr__(self) -> str:
        return f"<MicroBatchStream {self.id} {self.name}>"

    # -- transforms --------------------------------------------------------

    def map(self, fn: Callable, *, cost: Optional[float] = None, name=None) -> "MicroBatchStream":
        return MicroBatchStream(self.ssc, "map", (self,), lambda ds: ds.map(fn, cost=cost, name=name),
                                name=name)

    def filter(self, fn: Callable, *, cost: Optional[float] = None,
               name=None) -> "MicroBatchStream":
        return MicroBatchStream(self.ssc, "filter", (self,),
                                lambda ds: ds.filter(fn, cost=cost, name=name), name=name)

    def flat_map(self, fn: Callable, *, cost: Optional[float] = None,
                 name=None) -> "MicroBatchStream":
        return MicroBatchStream(self.ssc, "flat_map", (self,),
                                lambda ds: ds.flat_map(fn, cost=cost, name=name), name=name)

    def map_partitions(self, fn: Callable, *, cost: Optional[float] = None,
                       name=None) -> "MicroBatchStream":
        return MicroBatchStream(self.ssc, "map_partitions", (self,),
                                lambda ds: ds.map_partitions(fn, cost=cost, name=name), name=name)

    def transform(self, fn: Callable[[Dataset], Dataset], name=None) -> "MicroBatchStream":
        """Apply an arbitrary dataset-to-dataset function to every interval."""
        return MicroBatchStream(self.ssc, "transform", (self,), fn, name=name)

    def _check_aligned(self, other: "MicroBatchStream") -> None:
        if other.ssc is not self.ssc or other.slide_ms != self.slide_ms:
            raise IntervalMismatch(f"streams tick every {self.slide_ms} ms and "
                                   f"{other.slide_ms} ms")

    def union(self, *others: "MicroBatchStream") -> "MicroBatchStream":
        for o in others:
            self._check_aligned(o)
        return MicroBatchStream(self.ssc, "union", (self,) + others,
                                lambda *dss: dss[0].union(*dss[1:]))

    def join(self, other: "MicroBatchStream", num_partitions: Optional[int] = None) -> "MicroBatchStream":
        self._check_aligned(other)
        return MicroBatchStream(self.ssc, "join", (self, other),
                                lambda a, b: a.join(b, num_partitions))

    def window(self, window_length_ms: int, slide_ms: Optional[int] = None) -> "MicroBatchStream":
        spec = WindowSpec(window_length_ms, slide_ms or self.slide_ms)
        spec.validate(self.batch_interval_ms)
        if spec.slide_ms % self.slide_ms:
            raise InvalidWindow(f"slide {spec.slide_ms} ms is not a multiple of the parent's "
                                f"{self.slide_ms} ms")
        s = MicroBatchStream(self.ssc, "window", (self,), slide_ms=spec.slide_ms, name="window")
        s.window_spec = spec
        return s

    def update_state_by_key(self, update_fn: Callable[[Any, list, Any], Any], *,
                            num_partitions: Optional[int] = None,
                            ttl_ms: Optional[int] = None,
                            name: Optional[str] = None) -> "StateStream":
        return StateStream(self, update_fn, num_partitions, ttl_ms, name)

    def foreach_batch(self, output_fn: Callable[[int, Dataset], None]) -> "OutputBinding":
        binding = OutputBinding(self, output_fn)
        self.ssc._outputs.append(binding)
        return binding

    # -- generation --------------------------------------------------------

    def _dataset(self, batch_id: int) -> Optional[Dataset]:
        if batch_id in self._generated:
            return self._generated[batch_id]
        ds = self._generate(batch_id)
        self._generated[batch_id] = ds
        return ds

    def _generate(self, batch_id: int) -> Optional[Dataset]:
        kind = self.kind
        if kind == "window":
            return self._generate_window(batch_id)
        parent_sets = [p._dataset(batch_id) for p in self.parents]
        if any(d is None for d in parent_sets):
            return None
        return self.fn(*parent_sets)

    def _generate_window(self, batch_id: int) -> Optional[Dataset]:
        interval = self.batch_interval_ms
        if (batch_id * interval) % self.slide_ms:
            return None
        span = self.window_spec.window_length_ms // interval
        step = self.parents[0].slide_ms // interval
        members = [self.parents[0]._dataset(b)
                   for b in range(batch_id - span + 1, batch_id + 1) if b >= 1 and b % step == 0]
        members = [d for d in members if d is not None]
        if not members:
            return self.ssc.ctx.from_partitions([[]], name="window")
        return members[0].union(*members[1:]) if len(members) > 1 else members[0]

    def _forget(self, before: int) -> None:
        for b in [b for b in self._generated if b < before]:
            del self._generated[b]

    def remember_batches(self) -> int:
        own = 1
        if self.kind == "window":
            own = self.window_spec.window_length_ms // self.batch_interval_ms + 1
        return own + max((p.remember_batches() for p in self.parents), default=0)


class InputStream(MicroBatchStream):
    def __init__(self, ssc: "StreamingContext", receiver: Optional[Receiver],
                 queue: Optional[list] = None, num_partitions: int = 2):
        super().__init__(ssc, "input" if receiver else "queue",
                         name=receiver.name if receiver else "queue")
        self.receiver = receiver
        self.queue = queue
        self.queue_partitions = num_partitions

    def input_count(self, batch_id: int) -> int:
        if self.receiver is None:
            return len(self.queue[batch_id - 1]) if batch_id <= len(self.queue) else 0
        blocks = self.ssc._blocks.get((self.receiver.name, batch_id))
        return sum(len(b) for b in blocks) if blocks else 0

    def _generate(self, batch_id: int) -> Dataset:
        ctx = self.ssc.ctx
        if self.receiver is None:
            items = self.queue[batch_id - 1] if batch_id <= len(self.queue) else []
            return ctx.parallelize(list(items), self.queue_partitions, name="queue")
        blocks = self.ssc._blocks.get((self.receiver.name, batch_id))
        if blocks is None:
            blocks = [[] for _ in range(self.ssc.blocks_per_batch)]
        ds = ctx.from_partitions(blocks, name=self.receiver.name)
        decode = self.receiver.spec.decode
        return ds.map(decode, name="decode") if decode is not None else ds


class StateStream(MicroBatchStream):
    """Keyed state carried from interval to interval without reshuffling it.

    Each interval only the new values are shuffled, into the same partitioner
    the state already uses; the previous state dataset is then combined with
    them partition by partition.
    """

    def __init__(self, parent: MicroBatchStream, update_fn, num_partitions, ttl_ms, name):
        ssc = parent.ssc
        index = sum(1 for s in ssc._streams if isinstance(s, StateStream))
        super().__init__(ssc, "state", (parent,), name=name or f"state-{index}")
        self.update_fn = update_fn
        self.ttl_ms = ttl_ms
        n = num_partitions or ssc.default_parallelism
        self.partitioner = HashPartitioner(n)
        self.num_partitions = n
        self.committed: Dataset = self._empty()
        self.committed_batch = 0
        self._state_sets: dict[int, Dataset] = {}

    def _empty(self) -> Dataset:
        return self.ssc.ctx.from_partitions([[] for _ in range(self.num_partitions)],
                                            partitioner=self.partitioner, name=self.name)

    def _merge_fn(self, batch_time: int):
        update_fn, ttl = self.update_fn, self.ttl_ms

        def merge(new_part, old_part):
            new_values = dict(new_part)
            out = []
            seen = set()
            for key, (state, last) in old_part:
                seen.add(key)
                values = new_values.get(key, [])
                if ttl is not None and batch_time - last > ttl:
                    if not values:
                        continue  # idle past the TTL: evicted
                    state = None
                result = update_fn(key, values, state)
                if result is not REMOVE:
                    out.append((key, (result, batch_time if values else last)))
            for key, values in new_part:
                if key in seen:
                    continue
                result = update_fn(key, values, None)
                if result is not REMOVE:
                    out.append((key, (result, batch_time)))
            return out

        return merge

    def _generate(self, batch_id: int) -> Optional[Dataset]:
        parent = self.parents[0]._dataset(batch_id)
        if parent is None:
            return None
        batch_time = batch_id * self.batch_interval_ms
        grouped = parent.group_by_key(partitioner=self.partitioner)
        state = grouped.zip_partitions(self.committed, self._merge_fn(batch_time),
                                       name=self.name).persist()
        self._state_sets[batch_id] = state
        return state.map(lambda kv: (kv[0], kv[1][0]), name=f"{self.name}-view")

    def state_dataset(self, batch_id: Optional[int] = None) -> Dataset:
        if batch_id is None:
            return self.committed
        return self._state_sets[batch_id]

    def commit(self, batch_id: int) -> None:
        state = self._state_sets.pop(batch_id, None)
        if state is None:
            return
        previous = self.committed
        self.committed = state
        self.committed_batch = batch_id
        # older state is only reachable through lineage from now on
        if previous.persisted:
            previous.unpersist()

    def restore(self, partitions: list[list[tuple]], batch_id: int) -> None:
        data = [[(k, (s, ts)) for k, s, ts in part] for part in partitions]
        if len(data) != self.num_partitions:
            raise StreamError(f"{self.name}: checkpoint has {len(data)} partitions, "
                              f"stream uses {self.num_partitions}")
        self.committed = self.ssc.ctx.from_partitions(data, partitioner=self.partitioner,
                                                      name=self.name)
        self.committed_batch = batch_id

    def snapshot_partitions(self) -> list[list[tuple]]:
        parts = self.committed.collect_partitions()
        return [[(k, s, ts) for k, (s, ts) in part] for part in parts]

    def live_states(self) -> int:
        return self.committed.count()

    def persisted_datasets(self) -> list[Dataset]:
        return [self.committed] + list(self._state_sets.values())


@dataclass
class OutputBinding:
    stream: MicroBatchStream
    output_fn: Callable[[int, Dataset], None]
    invocations: int = 0

    def run(self, batch_id: int) -> None:
        ds = self.stream._dataset(batch_id)
        if ds is None:
            return
        self.invocations += 1
        self.output_fn(batch_id, ds)


class StreamingContext:
    """Owns the stream graph, the receivers and the sequential batch loop."""

    def __init__(self, ctx: Context, batch_interval_ms: int = 1000, *,
                 clock: Optional[Callable[[], int]] = None,
                 checkpoint_dir: Optional[str] = None,
                 checkpoint_interval_ms: int = DEFAULT_CHECKPOINT_MS,
                 write_ahead_log: bool = True,
                 replication_factor: int = DEFAULT_REPLICATION,
                 block_interval_ms: int = BLOCK_INTERVAL_MS,
                 default_parallelism: Optional[int] = None,
                 executor_loss_timeout_ms: int = EXECUTOR_LOSS_TIMEOUT_MS,
                 batch_overhead_ms: float = BATCH_OVERHEAD_MS):
        _interval_check(batch_interval_ms)
        self.ctx = ctx
        self.batch_interval_ms = batch_interval_ms
        self.clock = clock
        self.checkpoint_dir = checkpoint_dir
        self.checkpoint_interval_ms = checkpoint_interval_ms
        self.replication_factor = replication_factor
        self.block_interval_ms = min(block_interval_ms, batch_interval_ms)
        self.blocks_per_batch = math.ceil(batch_interval_ms / self.block_interval_ms)
        self.tick_ms = math.gcd(self.block_interval_ms, batch_interval_ms)
        self.executor_loss_timeout_ms = executor_loss_timeout_ms
        self.batch_overhead_ms = batch_overhead_ms
        slots = ctx.backend.processing_slots() if hasattr(ctx.backend, "processing_slots") else []
        self.default_parallelism = default_parallelism or max(1, len(slots) - 1)
        self.wal: Optional[WriteAheadLog] = None
        self._use_wal = write_ahead_log and checkpoint_dir is not None
        self._streams: list[MicroBatchStream] = []
        self._outputs: list[OutputBinding] = []
        self.receivers: list[Receiver] = []
        self._blocks: dict[tuple[str, int], list[list[StreamRecord]]] = {}
        self._replicas: dict[tuple[str, int, int], set[str]] = {}
        self._queue: list[_Batch] = []
        self._running: Optional[_Batch] = None
        self.completed: list[BatchStats] = []
        self.checkpoints: list[int] = []
        self.started = False
        self.stopped = False
        self.failure: Optional[BaseException] = None
        self._next_batch = 1
        self._last_tick = 0
        self.recomputed_stages = 0
        self.restored_from: Optional[CheckpointImage] = None

    # -- graph construction ------------------------------------------------

    def create_input_stream(self, spec: ReceiverSpec) -> InputStream:
        backend = self.ctx.backend
        total = len(backend.all_slots())
        if total <= len(self.receivers) + 1:
            raise NoFreeCore(f"{total} slots cannot host {len(self.receivers) + 1} receivers "
                             f"and leave one for processing")
        name = spec.name or f"receiver-{len(self.receivers)}"
        receiver = Receiver(self, spec, name)
        self.receivers.append(receiver)
        return InputStream(self, receiver)

    def queue_stream(self, batches: Sequence[Sequence[Any]], num_partitions: int = 2) -> InputStream:
        """Input stream fed from a fixed list of batches (batch k = batches[k-1])."""
        return InputStream(self, None, [list(b) for b in batches], num_partitions)

    def state_streams(self) -> list[StateStream]:
        return [s for s in self._streams if isinstance(s, StateStream)]

    # -- lifecycle ---------------------------------------------------------

    def start(self, now: int = 0, *, recover: bool = False) -> None:
        if self._use_wal:
            os.makedirs(self.checkpoint_dir, exist_ok=True)
            self.wal = WriteAheadLog(os.path.join(self.checkpoint_dir, "wal.log"))
        for r in self.receivers:
            if not r.start(now):
                raise NoFreeCore(f"no free slot for {r.name}")
        if self.receivers and not self.ctx.backend.processing_slots():
            raise NoFreeCore("receivers occupy every slot")
        last_batch = now // self.batch_interval_ms
        if recover:
            last_batch = self._recover(now)
        self._next_batch = last_batch + 1
        self._last_tick = now - now % self.tick_ms
        self.started = True
        # intervals that elapsed while the application was down are sealed at once
        while self._next_batch * self.batch_interval_ms <= now:
            self._seal(self._next_batch, now)
        self._schedule(now)

    def _recover(self, now: int) -> int:
        image = None
        if self.checkpoint_dir is not None:
            path = latest_checkpoint(self.checkpoint_dir)
            if path is not None:
                image = read_checkpoint(path)
        last_batch, high_water = 0, 0
        if image is not None:
            self.restore_from_checkpoint(image)
            last_batch, high_water = image.last_batch, image.wal_high_water
        if self.wal is not None:
            keep_from = last_batch - self._remember() + 1
            by_name = {r.name: r for r in self.receivers}
            for rec in self.wal.records():
                batch = self.batch_of(rec.receive_ts)
                if rec.sequence <= high_water and batch < keep_from:
                    continue
                if rec.source in by_name:
                    self._store_record(rec.source,
                                       StreamRecord(rec.message_id, rec.payload, rec.receive_ts),
                                       [])
        return last_batch

    def crash(self) -> None:
        """Stop as if the driver process died: nothing in memory survives."""
        for r in self.receivers:
            r.stop()
        self._queue.clear()
        self._running = None
        self._blocks.clear()
        self._replicas.clear()
        if self.wal is not None:
            self.wal.close()
        self.stopped = True

    def stop(self) -> None:
        self.crash()

    # -- receiving ---------------------------------------------------------

    def batch_of(self, ts: int) -> int:
        return max(1, math.ceil(ts / self.batch_interval_ms))

    def _store_record(self, source: str, rec: StreamRecord, replicas: list[str]) -> None:
        batch = self.batch_of(rec.receive_ts)
        offset = rec.receive_ts - (batch - 1) * self.batch_interval_ms - 1
        block = min(max(offset, 0) // self.block_interval_ms, self.blocks_per_batch - 1)
        blocks = self._blocks.get((source, batch))
        if blocks is None:
            blocks = [[] for _ in range(self.blocks_per_batch)]
            self._blocks[(source, batch)] = blocks
        blocks[block].append(rec)
        self._replicas.setdefault((source, batch, block), set()).update(replicas)

    # -- time --------------------------------------------------------------

    def advance(self, until_ms: Optional[int] = None) -> Optional[BatchStats]:
        """Run the simulation up to ``until_ms`` (default: one more interval).

        Returns the stats of the latest completed batch, if any.
        """
        if self.failure is not None:
            raise self.failure
        if not self.started:
            self.start(self._last_tick)
        if self.stopped:
            raise StreamError("streaming context is stopped")
        if until_ms is None:
            until_ms = self._last_tick + self.batch_interval_ms
        try:
            tp = self._last_tick + self.tick_ms
            while tp <= until_ms:
                self._tick(tp)
                self._last_tick = tp
                tp += self.tick_ms
            self._schedule(until_ms)
        except (CheckpointWriteFailed, BatchFailed) as exc:
            self.failure = exc
            raise
        return self.completed[-1] if self.completed else None

    def _tick(self, t: int) -> None:
        if self.clock is not None and hasattr(self.clock, "advance_to") and self.clock() < t:
            self.clock.advance_to(t)
        self._schedule(t)
        for r in self.receivers:
            if not r.alive:
                if r.start(t):
                    r.restarts += 1
                else:
                    continue
            r.poll(t)
            if t % self.block_interval_ms == 0 or t % self.batch_interval_ms == 0:
                r.flush()
        if t % self.batch_interval_ms == 0:
            while self._next_batch * self.batch_interval_ms <= t:
                self._seal(self._next_batch, t)
        self._schedule(t)

    def _seal(self, batch_id: int, at: float) -> None:
        count = sum(s.input_count(batch_id) for s in self._streams if isinstance(s, InputStream))
        hw = self.wal.last_sequence if self.wal is not None else 0
        self._queue.append(_Batch(batch_id, batch_id * self.batch_interval_ms, at, hw, count))
        self._next_batch = batch_id + 1

    @property
    def waiting_batches(self) -> int:
        return len(self._queue)

    @property
    def running_batch(self) -> Optional[int]:
        return self._running.batch_id if self._running else None

    def _schedule(self, t: float) -> None:
        while True:
            if self._running is not None:
                if self._running.end_ms > t:
                    return
                done = self._running
                self._running = None
                self._commit(done)
                start = done.end_ms
            else:
                start = None
            if not self._queue:
                return
            nxt = self._queue[0]
            begin = max(nxt.sealed_ms, start if start is not None else t)
            if begin > t:
                return
            self._queue.pop(0)
            self._start(nxt, begin)

    def _start(self, batch: _Batch, at: float) -> None:
        batch.start_ms = at
        duration = self._execute(batch)
        batch.end_ms = at + duration
        self._running = batch

    def _execute(self, batch: _Batch) -> float:
        n0 = len(self.ctx.jobs)
        batch.attempts += 1
        for out in self._outputs:
            try:
                out.run(batch.batch_id)
            except Exception as exc:
                raise BatchFailed(f"batch {batch.batch_id} output failed: {exc!r}") from exc
        for s in self.state_streams():
            s._dataset(batch.batch_id)
        if self.checkpoint_dir is not None and batch.time_ms % self.checkpoint_interval_ms == 0:
            batch.image = self._capture(batch)
        jobs = self.ctx.jobs[n0:]
        batch.jobs = jobs
        batch.recomputed_stages += sum(j.recovered_stages for j in jobs)
        return self.batch_overhead_ms + sum(j.duration_ms for j in jobs)

    def _capture(self, batch: _Batch) -> CheckpointImage:
        states = {}
        for s in self.state_streams():
            ds = s._state_sets.get(batch.batch_id, s.committed)
            parts = ds.collect_partitions()
            states[s.name] = [[(k, st, ts) for k, (st, ts) in part] for part in parts]
        return CheckpointImage(batch.time_ms, batch.wal_high_water, batch.batch_id, states)

    def _commit(self, batch: _Batch) -> None:
        for s in self.state_streams():
            s.commit(batch.batch_id)
        if batch.image is not None:
            write_checkpoint(self.checkpoint_dir, batch.image)
            self.checkpoints.append(batch.image.checkpoint_ts)
            # cut lineage: the state now comes from the checkpoint image
            for s in self.state_streams():
                s.restore(batch.image.states[s.name], batch.batch_id)
        self.recomputed_stages += batch.recomputed_stages
        self.completed.append(BatchStats(
            batch.batch_id, batch.time_ms, batch.input_count, batch.end_ms - batch.start_ms,
            batch.start_ms - batch.time_ms, len(self._queue), batch.start_ms, batch.end_ms,
            batch.recomputed_stages, batch.attempts))
        horizon = batch.batch_id - self._remember() + 1
        for s in self._streams:
            s._forget(horizon)
        for key in [k for k in self._blocks if k[1] < horizon]:
            del self._blocks[key]
        for key in [k for k in self._replicas if k[1] < horizon]:
            del self._replicas[key]

    def _remember(self) -> int:
        return max((s.remember_batches() for s in self._streams), default=1)

    # -- faults ------------------------------------------------------------

    def persisted_datasets(self) -> list[Dataset]:
        out = []
        for s in self.state_streams():
            out.extend(s.persisted_datasets())
        return out

    def on_worker_lost(self, worker: str, now: float) -> dict:
        """React to a dead worker; the backend must already list it as dead."""
        self._schedule(now)
        lost_blocks = self.ctx.drop_worker(worker, self.persisted_datasets())
        for key, holders in self._replicas.items():
            holders.discard(worker)
            if not holders and self.wal is None:
                source, batch, block = key
                blocks = self._blocks.get((source, batch))
                if blocks is not None:
                    blocks[block] = []
        for r in self.receivers:
            if r.slot is not None and r.slot[0] == worker:
                r.stop()
                if r.start(int(now)):
                    r.restarts += 1
        affected = 0
        b = self._running
        if b is not None and b.start_ms <= now < b.end_ms:
            hit = [s for j in b.jobs for s in j.stages
                   if any(t.worker == worker for t in s.tasks)]
            if hit:
                affected = len(hit)
                b.recomputed_stages += affected
                duration = self._execute(b)
                b.end_ms = now + self.executor_loss_timeout_ms + duration
        return {"lost_blocks": lost_blocks, "reexecuted_stages": affected}

    # -- checkpoints -------------------------------------------------------

    def checkpoint_now(self) -> CheckpointImage:
        last = self.completed[-1] if self.completed else None
        last_batch = last.batch_id if last else self._next_batch - 1
        hw = 0
        if self.wal is not None:
            # high water of the last completed batch: everything received up to its end
            limit = last_batch * self.batch_interval_ms
            hw = max((r.sequence for r in self.wal.records() if r.receive_ts <= limit), default=0)
        states = {s.name: s.snapshot_partitions() for s in self.state_streams()}
        image = CheckpointImage(last_batch * self.batch_interval_ms, hw, last_batch, states)
        if self.checkpoint_dir is not None:
            write_checkpoint(self.checkpoint_dir, image)
            self.checkpoints.append(image.checkpoint_ts)
        return image

    def restore_from_checkpoint(self, image: CheckpointImage) -> None:
        for s in self.state_streams():
            if s.name in image.states:
                s.restore(image.states[s.name], image.last_batch)
        self.restored_from = image
        self._next_batch = image.last_batch + 1

    # -- helpers for callers -----------------------------------------------

    def run_batches(self, n: int) -> list[BatchStats]:
        """Advance ``n`` intervals and wait until those batches have completed."""
        target = self._last_tick + n * self.batch_interval_ms
        self.advance(target)
        last_id = target // self.batch_interval_ms
        while not self.completed or self.completed[-1].batch_id < last_id:
            self.advance(self._last_tick + self.tick_ms)
        return list(self.completed)
