"""The car-data processing service: decode, filter, search, notify.

Wiring mirrors the decorator chain::

    notify.use(search.use(first_appearance.use(fuel_filter.use(decode.use(source)))))

while the raw messages are archived to the immutable store on the side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Callable, Optional

from ..engine.core import Context, LocalBackend, charge
from ..engine.stream import ReceiverSpec, StateStream, StreamingContext, StreamRecord
from ..theta.broker import Broker
from ..theta.chain import OutputProcessor, PreProcessor, StreamSource, TypedStream
from ..theta.service import ServiceConfig, ServiceHandle, run_app_service
from ..theta.store import ImmutableStore, ServingView
from .data import prices_from_store, stations_from_store
from .filters import fuel_below_threshold, trip_update
from .model import DeadLetter, GasStation, PriceEvent, VehicleReading, parse_vehicle_reading
from .notify import RECOMMENDATIONS_TOPIC
from .prices import HistoryPriceSource, PriceCache, PriceHistory
from .recommend import (
    NoRecommendation,
    Outcome,
    Recommendation,
    RecommendContext,
    RecommenderConfig,
    as_push_message,
    recommend_station,
)
from .rtree import StationIndex, build_station_index

VEHICLE_TOPIC = "vehicle-data"
DEAD_LETTER_TOPIC = "vehicle-data.dead"
RAW_COLLECTION = "vehicle-data"


def car_data_source(ssc: StreamingContext, broker: Broker, topic: str = VEHICLE_TOPIC, *,
                    reliable: bool = True) -> StreamSource:
    spec = ReceiverSpec(broker, topic, group="car-data", reliable=reliable, name="car-data")
    return StreamSource(ssc, "raw", lambda c: c.create_input_stream(spec))


class RawArchive:
    """Appends each batch's raw messages once, as a single store record."""

    def __init__(self, store: ImmutableStore, collection: str = RAW_COLLECTION):
        self.store = store
        self.collection = collection
        self._written = {r.payload["batch"] for r in store.scan(collection)}

    def write(self, batch_id: int, ds) -> None:
        if batch_id in self._written:
            return
        records = sorted(ds.collect(), key=lambda r: r.message_id)
        if records:
            self.store.append(self.collection, {
                "batch": batch_id,
                "records": [{"message_id": r.message_id,
                             "payload": r.payload.decode("utf-8", "replace")} for r in records]})
        self._written.add(batch_id)

    def message_ids(self) -> list[str]:
        return [m["message_id"] for r in self.store.scan(self.collection)
                for m in r.payload["records"]]


def decode_processor(broker: Optional[Broker] = None,
                     dead_topic: str = DEAD_LETTER_TOPIC) -> PreProcessor:
    published: set[int] = set()

    def publish_dead(batch_id: int, ds) -> None:
        if batch_id in published:
            return
        for dl in ds.collect():
            broker.publish(dead_topic, json.loads(dl.to_json()))
        published.add(batch_id)

    def fn(s):
        parsed = s.map(lambda r: parse_vehicle_reading(r.payload, r.message_id), name="parse")
        if broker is not None:
            parsed.filter(lambda x: isinstance(x, DeadLetter), name="dead").foreach_batch(publish_dead)
        return parsed.filter(lambda x: isinstance(x, VehicleReading), name="valid")

    return PreProcessor("decode", "raw", "reading", fn)


def fuel_level_filter(cfg: RecommenderConfig = RecommenderConfig()) -> PreProcessor:
    threshold = cfg.fuel_threshold_pct
    return PreProcessor("fuel-level", "reading", "reading",
                        lambda s: s.filter(lambda r: fuel_below_threshold(r, threshold),
                                           name="fuel-level"))


class FirstAppearanceFilter(PreProcessor):
    """Keyed trip state; ``state`` is the state stream once the filter is used."""

    def __init__(self, cfg: RecommenderConfig = RecommenderConfig(),
                 num_partitions: Optional[int] = None, *, state_cost_ms: float = 0.0):
        gap = cfg.trip_gap_ms
        self.state: Optional[StateStream] = None

        def update(key, readings, old):
            if state_cost_ms:
                charge(state_cost_ms)  # every live state is visited once per batch
            return trip_update(readings, old, gap)

        def fn(s):
            keyed = s.map(lambda r: (r.vehicle_id, r), name="by-vehicle")
            self.state = keyed.update_state_by_key(
                update, num_partitions=num_partitions, ttl_ms=gap, name="trip-state")
            return self.state.flat_map(lambda kv: kv[1].passed, name="first-appearance")

        super().__init__("first-appearance", "reading", "reading", fn)


def gas_station_search(index: Any, prices, history: PriceHistory,
                       cfg: RecommenderConfig = RecommenderConfig(), *,
                       cost_ms: float = 0.0) -> PreProcessor:
    """``index`` is a StationIndex or a broadcast handle of one."""

    def search(r: VehicleReading) -> Outcome:
        if cost_ms:
            charge(cost_ms)
        idx = index.value if hasattr(index, "value") else index
        return recommend_station(r, RecommendContext(idx, prices, history, cfg))

    return PreProcessor("gas-station-search", "reading", "outcome",
                        lambda s: s.map(search, name="gas-station-search"))


def recommendation_doc(rec: Recommendation, batch_id: int) -> dict:
    doc = as_push_message(rec)
    doc.update(writer_batch_id=batch_id, reason=rec.reason,
               distance_km=round(rec.distance_km, 4), timestamp=rec.timestamp)
    return doc


def notification_output(broker: Broker, view: Optional[ServingView] = None,
                        topic: str = RECOMMENDATIONS_TOPIC,
                        on_outcome: Optional[Callable[[int, Outcome], None]] = None) -> OutputProcessor:
    """Writes results to the serving view and the recommendations topic.

    Replayed batches publish again; the notifier drops them by
    (writer batch, vehicle).
    """

    def write(batch_id: int, ds) -> None:
        outcomes = sorted(ds.collect(), key=lambda o: (o.timestamp, o.vehicle_id))
        for o in outcomes:
            if on_outcome is not None:
                on_outcome(batch_id, o)
            if isinstance(o, Recommendation):
                doc = recommendation_doc(o, batch_id)
                if view is not None:
                    view.upsert("recommendations", o.vehicle_id, doc, batch_id)
                broker.publish(topic, doc)
            elif view is not None:
                view.upsert("suppressed", o.vehicle_id, {"reason": o.reason,
                                                         "timestamp": o.timestamp}, batch_id)

    return OutputProcessor("gas-station-notification", "outcome", lambda s: s.foreach_batch(write))


@dataclass
class CisPipeline:
    source: StreamSource
    archive: Optional[RawArchive]
    first_appearance: FirstAppearanceFilter
    outcomes: TypedStream
    index: Any


def build_cis_pipeline(ssc: StreamingContext, broker: Broker, *,
                       index: StationIndex, prices, history: PriceHistory,
                       cfg: RecommenderConfig = RecommenderConfig(),
                       store: Optional[ImmutableStore] = None,
                       view: Optional[ServingView] = None,
                       source: Optional[StreamSource] = None,
                       rec_topic: str = RECOMMENDATIONS_TOPIC,
                       search_cost_ms: float = 0.0,
                       num_partitions: Optional[int] = None,
                       on_outcome=None) -> CisPipeline:
    source = source or car_data_source(ssc, broker)
    archive = None
    if store is not None:
        archive = RawArchive(store)
        source.typed().stream.foreach_batch(archive.write)
    # the index is built on the driver and shipped once to each worker
    shared_index = ssc.ctx.broadcast(index)
    first = FirstAppearanceFilter(cfg, num_partitions)
    search = gas_station_search(shared_index, prices, history, cfg, cost_ms=search_cost_ms)
    outcomes = search.use(first.use(fuel_level_filter(cfg).use(decode_processor(broker).use(source))))
    notification_output(broker, view, rec_topic, on_outcome).use(outcomes)
    return CisPipeline(source, archive, first, outcomes, shared_index)


def run_cis_processing_service(config: ServiceConfig, *,
                               cfg: RecommenderConfig = RecommenderConfig(),
                               prices=None, **kwargs) -> ServiceHandle:
    """Processing service body: index and history come from the immutable store."""

    def body(h: ServiceHandle) -> CisPipeline:
        index = build_station_index(stations_from_store(h.store))
        history = PriceHistory(prices_from_store(h.store))
        live = prices or PriceCache(HistoryPriceSource(history), cfg.price_cache_ttl_s)
        return build_cis_pipeline(h.ssc, h.broker, index=index, prices=live, history=history,
                                  cfg=cfg, store=h.store, view=h.view, **kwargs)

    return run_app_service(config, body)


def run_oneshot(stations: list[GasStation], events: list[PriceEvent], payloads: list[bytes],
                cfg: RecommenderConfig = RecommenderConfig()) -> list[Outcome]:
    """Push one file of vehicle messages through the pipeline as a single batch."""
    ssc = StreamingContext(Context(LocalBackend(1, 2)), 1000)
    broker = Broker(lambda: 0)
    history = PriceHistory(events)
    records = [StreamRecord(f"line:{i + 1}", p, 0) for i, p in enumerate(payloads)]
    source = StreamSource(ssc, "raw", lambda c: c.queue_stream([records]))
    results: list[Outcome] = []
    build_cis_pipeline(ssc, broker, index=build_station_index(stations),
                       prices=PriceCache(HistoryPriceSource(history), cfg.price_cache_ttl_s),
                       history=history, cfg=cfg, source=source,
                       on_outcome=lambda b, o: results.append(o))
    ssc.run_batches(1)
    return results


__all__ = [
    "CisPipeline", "FirstAppearanceFilter", "NoRecommendation", "RawArchive",
    "build_cis_pipeline", "car_data_source", "decode_processor", "fuel_level_filter",
    "gas_station_search", "notification_output", "run_cis_processing_service", "run_oneshot",
]
