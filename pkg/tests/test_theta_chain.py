import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cisflow.clock import VirtualClock
from cisflow.engine.core import Context, LocalBackend
from cisflow.engine.stream import StreamingContext
from cisflow.theta.broker import Broker
from cisflow.theta.chain import (
    OutputProcessor,
    PreProcessor,
    StreamSource,
    TypeTagMismatch,
    filter_processor,
    map_processor,
)
from cisflow.theta.service import MissingBinding, ServiceConfig, run_app_service
from cisflow.theta.store import ImmutableStore


def ssc():
    return StreamingContext(Context(LocalBackend(1, 2)), 1000)


def sink_processor(tag, out):
    return OutputProcessor("sink", tag, lambda s: s.foreach_batch(
        lambda b, ds: out.setdefault(b, []).extend(ds.collect())))


def test_innermost_processor_applies_first():
    sc = ssc()
    order = []
    source = StreamSource(sc, "n", lambda c: c.queue_stream([[1]]))
    a = map_processor("a", "n", "n", lambda x: (order.append("a"), x * 10)[1])
    b = map_processor("b", "n", "n", lambda x: (order.append("b"), x + 1)[1])
    out = {}
    sink_processor("n", out).use(b.use(a.use(source)))
    sc.run_batches(1)
    assert out[1] == [11]
    assert order == ["a", "b"]


def test_source_built_once_for_two_chains():
    sc = ssc()
    source = StreamSource(sc, "n", lambda c: c.queue_stream([[1, 2, 3]]))
    evens, odds = {}, {}
    sink_processor("n", evens).use(filter_processor("even", "n", lambda x: x % 2 == 0).use(source))
    sink_processor("n", odds).use(filter_processor("odd", "n", lambda x: x % 2).use(source))
    sc.run_batches(1)
    assert source.builds == 1
    assert evens[1] == [2] and sorted(odds[1]) == [1, 3]


def test_tag_mismatch_at_construction():
    sc = ssc()
    source = StreamSource(sc, "vehicle", lambda c: c.queue_stream([]))
    station_proc = PreProcessor("nearby", "station", "station", lambda s: s)
    with pytest.raises(TypeTagMismatch):
        station_proc.use(source)
    with pytest.raises(TypeTagMismatch):
        sink_processor("station", {}).use(source)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(-50, 50), max_size=6), min_size=1, max_size=4),
       st.integers(1, 5), st.integers(-3, 3))
def test_chain_equals_function_composition(batches, mul, add):
    sc = ssc()
    source = StreamSource(sc, "n", lambda c: c.queue_stream(batches))
    f = map_processor("f", "n", "n", lambda x: x * mul)
    g = filter_processor("g", "n", lambda x: x > add)
    h = map_processor("h", "n", "s", str)
    out = {}
    sink_processor("s", out).use(h.use(g.use(f.use(source))))
    sc.run_batches(len(batches))
    for i, batch in enumerate(batches, 1):
        expected = [str(x * mul) for x in batch if x * mul > add]
        assert sorted(out.get(i, [])) == sorted(expected)


def test_service_runs_body_with_full_config():
    broker, store = Broker(VirtualClock()), ImmutableStore()
    handle = run_app_service(ServiceConfig("svc", broker, store), lambda h: "ran")
    assert handle.result == "ran" and handle.ssc is None


def test_service_without_store_never_runs_body():
    called = []
    with pytest.raises(MissingBinding) as info:
        run_app_service(ServiceConfig("svc", Broker(VirtualClock()), None),
                        lambda h: called.append(1))
    assert info.value.binding == "immutable_store"
    assert called == []


def test_service_without_broker():
    with pytest.raises(MissingBinding) as info:
        run_app_service(ServiceConfig("svc", None, ImmutableStore()), lambda h: None)
    assert info.value.binding == "messaging"


def test_processing_service_initializes_engine():
    handle = run_app_service(
        ServiceConfig("proc", Broker(VirtualClock()), ImmutableStore(), engine=ssc),
        lambda h: h.ssc)
    assert isinstance(handle.result, StreamingContext)
