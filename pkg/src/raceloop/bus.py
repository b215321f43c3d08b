"""Minimal in-process publish-subscribe bus with timestamped messages.

Topics must be registered before use.  Delivery is at-least-once and in order
per (publisher, topic).  In simulated mode messages are delivered through the
virtual event queue at zero virtual latency; in wall mode handlers run inline
on the publishing thread, so production handlers are required to be cheap,
thread-safe slot operations (which is how the control loop uses them).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable

NEXT_STATE_TOPIC = "nextState"
INPUT_CMD_TOPIC = "inputCmd"

# The source material names the control channel both `inputCmd` and
# `mpcInput`; this artifact standardizes on `inputCmd` and accepts the alias.
TOPIC_ALIASES = {"mpcInput": INPUT_CMD_TOPIC}


def canonical_topic(name: str) -> str:
    return TOPIC_ALIASES.get(name, name)


class UnknownTopicError(KeyError):
    pass


@dataclass(frozen=True)
class TimestampedMessage:
    payload: Any
    timestamp_ns: int  # producer clock at publish, set exactly once


class Bus:
    """Topic bus; pass a SimulatedClock's schedule as `scheduler` for
    virtual-time delivery, or None for inline (wall) delivery."""

    def __init__(self, clock, scheduler: Callable[[int, Callable], None] | None = None):
        self._clock = clock
        self._scheduler = scheduler
        self._lock = threading.Lock()
        self._topics: dict[str, list[Callable[[TimestampedMessage], None]]] = {}

    def register_topic(self, name: str) -> None:
        with self._lock:
            self._topics.setdefault(canonical_topic(name), [])

    def subscribe(self, topic: str, handler: Callable[[TimestampedMessage], None]) -> None:
        topic = canonical_topic(topic)
        with self._lock:
            if topic not in self._topics:
                raise UnknownTopicError(f"topic {topic!r} not registered")
            self._topics[topic].append(handler)

    def publish(self, topic: str, payload: Any) -> TimestampedMessage:
        topic = canonical_topic(topic)
        with self._lock:
            if topic not in self._topics:
                raise UnknownTopicError(f"topic {topic!r} not registered")
            handlers = list(self._topics[topic])
        msg = TimestampedMessage(payload=payload, timestamp_ns=self._clock.now_ns())
        if self._scheduler is None:
            for handler in handlers:
                handler(msg)
        else:
            now = self._clock.now_ns()
            for handler in handlers:
                self._scheduler(now, lambda h=handler: h(msg))
        return msg
