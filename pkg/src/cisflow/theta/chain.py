"""Decorator-style processor chains over typed micro-batch streams.

A chain reads inside out: ``out.use(b.use(a.use(source)))`` applies ``a``
first, then ``b``, then hands the result to the output processor.  Every
stream carries an element-type tag and adjacent tags are checked when the
chain is built, not when data flows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional, Union

from ..engine.stream import MicroBatchStream, StreamingContext


class TypeTagMismatch(TypeError):
    pass


@dataclass(frozen=True)
class TypedStream:
    stream: MicroBatchStream
    tag: str


class StreamSource:
    """Builds its stream once; later uses share the same stream object."""

    def __init__(self, ssc: StreamingContext, tag: str,
                 factory: Callable[[StreamingContext], MicroBatchStream]):
        self.ssc = ssc
        self.tag = tag
        self._factory = factory
        self._typed: Optional[TypedStream] = None
        self.builds = 0

    def typed(self) -> TypedStream:
        if self._typed is None:
            self._typed = TypedStream(self._factory(self.ssc), self.tag)
            self.builds += 1
        return self._typed


Upstream = Union[TypedStream, StreamSource]


def _resolve(upstream: Upstream) -> TypedStream:
    return upstream.typed() if isinstance(upstream, StreamSource) else upstream


class PreProcessor:
    """Typed stream in, typed stream out."""

    def __init__(self, name: str, input_tag: str, output_tag: str,
                 fn: Callable[[MicroBatchStream], MicroBatchStream]):
        self.name = name
        self.input_tag = input_tag
        self.output_tag = output_tag
        self.fn = fn

    def use(self, upstream: Upstream) -> TypedStream:
        src = _resolve(upstream)
        if src.tag != self.input_tag:
            raise TypeTagMismatch(f"{self.name} expects {self.input_tag!r} elements, "
                                  f"got {src.tag!r}")
        return TypedStream(self.fn(src.stream), self.output_tag)

    def __repr__(self) -> str:
        return f"<PreProcessor {self.name}: {self.input_tag} -> {self.output_tag}>"


class OutputProcessor:
    """Terminal processor: turns a typed stream into an effect binding."""

    def __init__(self, name: str, input_tag: str, fn: Callable[[MicroBatchStream], Any]):
        self.name = name
        self.input_tag = input_tag
        self.fn = fn

    def use(self, upstream: Upstream) -> Any:
        src = _resolve(upstream)
        if src.tag != self.input_tag:
            raise TypeTagMismatch(f"{self.name} expects {self.input_tag!r} elements, "
                                  f"got {src.tag!r}")
        return self.fn(src.stream)

    def __repr__(self) -> str:
        return f"<OutputProcessor {self.name}: {self.input_tag}>"


def map_processor(name: str, input_tag: str, output_tag: str, fn: Callable,
                  **kwargs) -> PreProcessor:
    return PreProcessor(name, input_tag, output_tag, lambda s: s.map(fn, name=name, **kwargs))


def filter_processor(name: str, tag: str, pred: Callable, **kwargs) -> PreProcessor:
    return PreProcessor(name, tag, tag, lambda s: s.filter(pred, name=name, **kwargs))
