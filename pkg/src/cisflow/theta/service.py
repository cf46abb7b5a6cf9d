"""Service bootstrap: every service gets a broker and an immutable store."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional

from ..engine.stream import StreamingContext
from .broker import Broker
from .store import ImmutableStore, ServingView


class MissingBinding(Exception):
    def __init__(self, binding: str):
        super().__init__(f"service configuration lacks a {binding} binding")
        self.binding = binding


@dataclass
class ServiceConfig:
    name: str
    messaging: Optional[Broker] = None
    immutable_store: Optional[ImmutableStore] = None
    serving_view: Optional[ServingView] = None
    # processing services also get a stream engine built by this factory
    engine: Optional[Callable[[], StreamingContext]] = None


@dataclass
class ServiceHandle:
    config: ServiceConfig
    broker: Broker
    store: ImmutableStore
    view: Optional[ServingView]
    ssc: Optional[StreamingContext]
    result: Any = None


def run_app_service(config: ServiceConfig, body: Callable[[ServiceHandle], Any]) -> ServiceHandle:
    """Check the bindings, set up the engine if asked, then run ``body``."""
    if config.messaging is None:
        raise MissingBinding("messaging")
    if config.immutable_store is None:
        raise MissingBinding("immutable_store")
    ssc = config.engine() if config.engine is not None else None
    handle = ServiceHandle(config, config.messaging, config.immutable_store,
                           config.serving_view, ssc)
    handle.result = body(handle)
    return handle
