"""In-process dual queue (main + priority) with visibility timeouts and
at-least-once delivery. Durability lives in the store, not here: a lost
in-flight message is simply re-picked in a later cycle."""

from __future__ import annotations

import itertools
import threading
from collections import deque
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

from .model import Priority, QueueMessage

DEFAULT_CAPACITY = 100_000
DEFAULT_VISIBILITY_TIMEOUT_S = 30.0


class QueueFull(Exception):
    """Send rejected at capacity; callers must treat this as backpressure."""


class NotInFlight(Exception):
    """Delete matched no in-flight message: duplicate processing, or the
    visibility timeout already reclaimed it. Log it, do not crash."""


@dataclass(frozen=True)
class Depths:
    visible_main: int
    visible_priority: int
    in_flight: int

    @property
    def visible(self) -> int:
        return self.visible_main + self.visible_priority

    @property
    def total(self) -> int:
        return self.visible + self.in_flight


@dataclass(frozen=True)
class QueueCounters:
    sent_main: int = 0
    sent_priority: int = 0
    received_main: int = 0
    received_priority: int = 0
    deleted_main: int = 0
    deleted_priority: int = 0

    @property
    def sent(self) -> int:
        return self.sent_main + self.sent_priority

    @property
    def received(self) -> int:
        return self.received_main + self.received_priority

    @property
    def deleted(self) -> int:
        return self.deleted_main + self.deleted_priority


@dataclass
class _InFlight:
    seq: int
    message: QueueMessage
    invisible_until: datetime


class DualQueue:
    """Two stable FIFOs and an in-flight map; every message is in exactly
    one of {main, priority, in_flight} or deleted. All operations are
    atomic and callable from any thread."""

    def __init__(
        self,
        capacity: int = DEFAULT_CAPACITY,
        visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT_S,
    ):
        self.capacity = capacity
        self.visibility_timeout = visibility_timeout
        self._lock = threading.Lock()
        self._seq = itertools.count()
        self._queues: dict[Priority, deque[tuple[int, QueueMessage]]] = {
            Priority.MAIN: deque(),
            Priority.PRIORITY: deque(),
        }
        self._in_flight: dict[str, _InFlight] = {}
        self._sent = {Priority.MAIN: 0, Priority.PRIORITY: 0}
        self._received = {Priority.MAIN: 0, Priority.PRIORITY: 0}
        self._deleted = {Priority.MAIN: 0, Priority.PRIORITY: 0}

    def send(self, msg: QueueMessage) -> str:
        with self._lock:
            total = (
                len(self._queues[Priority.MAIN])
                + len(self._queues[Priority.PRIORITY])
                + len(self._in_flight)
            )
            if total >= self.capacity:
                raise QueueFull(f"queue at capacity {self.capacity}")
            self._queues[msg.priority].append((next(self._seq), msg))
            self._sent[msg.priority] += 1
            return msg.message_id

    def _reclaim_expired(self, now: datetime) -> None:
        expired = [e for e in self._in_flight.values() if e.invisible_until <= now]
        if not expired:
            return
        # Back to the FRONT of the class queue, oldest first, to preserve
        # approximate age ordering.
        expired.sort(key=lambda e: e.seq)
        for entry in reversed(expired):
            del self._in_flight[entry.message.message_id]
            self._queues[entry.message.priority].appendleft((entry.seq, entry.message))

    def receive(self, max_messages: int, now: datetime) -> list[QueueMessage]:
        if max_messages < 1:
            raise ValueError("max_messages must be >= 1")
        with self._lock:
            self._reclaim_expired(now)
            out: list[QueueMessage] = []
            deadline = now + timedelta(seconds=self.visibility_timeout)
            for cls in (Priority.PRIORITY, Priority.MAIN):
                q = self._queues[cls]
                while q and len(out) < max_messages:
                    seq, msg = q.popleft()
                    delivered = replace(msg, receive_count=msg.receive_count + 1)
                    self._in_flight[delivered.message_id] = _InFlight(seq, delivered, deadline)
                    self._received[cls] += 1
                    out.append(delivered)
                if len(out) >= max_messages:
                    break
            return out

    def delete(self, message_id: str) -> None:
        with self._lock:
            entry = self._in_flight.pop(message_id, None)
            if entry is None:
                raise NotInFlight(message_id)
            self._deleted[entry.message.priority] += 1

    def depths(self) -> Depths:
        with self._lock:
            return Depths(
                visible_main=len(self._queues[Priority.MAIN]),
                visible_priority=len(self._queues[Priority.PRIORITY]),
                in_flight=len(self._in_flight),
            )

    def counters(self) -> QueueCounters:
        with self._lock:
            return QueueCounters(
                sent_main=self._sent[Priority.MAIN],
                sent_priority=self._sent[Priority.PRIORITY],
                received_main=self._received[Priority.MAIN],
                received_priority=self._received[Priority.PRIORITY],
                deleted_main=self._deleted[Priority.MAIN],
                deleted_priority=self._deleted[Priority.PRIORITY],
            )


__all__ = [
    "DEFAULT_CAPACITY",
    "DEFAULT_VISIBILITY_TIMEOUT_S",
    "Depths",
    "DualQueue",
    "NotInFlight",
    "QueueCounters",
    "QueueFull",
]
