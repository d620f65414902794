"""Periodic tick driver: claims due and stale streams from the store and
fans each one out as one queue message per channel. Queue-full ticks revert
unqueued claims so the next cycle retries them."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from datetime import datetime
from typing import Callable

from .model import FeedStream, Priority, QueueMessage, make_message, utcnow
from .queues import DualQueue, QueueFull
from .store import StoreError, StreamStore

logger = logging.getLogger(__name__)

DEFAULT_TICK_INTERVAL_S = 5.0
DEFAULT_PICK_LIMIT = 1000
DEFAULT_STALE_AFTER_S = 900.0


@dataclass(frozen=True)
class SchedulerConfig:
    tick_interval: float = DEFAULT_TICK_INTERVAL_S
    pick_horizon: float | None = None  # defaults to tick_interval
    pick_limit: int = DEFAULT_PICK_LIMIT
    stale_after: float = DEFAULT_STALE_AFTER_S

    def __post_init__(self):
        if self.pick_horizon is not None and self.pick_horizon < self.tick_interval:
            raise ValueError("pick_horizon below tick_interval would skip due streams")
        if self.pick_limit < 1:
            raise ValueError("pick_limit must be >= 1")

    @property
    def horizon(self) -> float:
        return self.tick_interval if self.pick_horizon is None else self.pick_horizon


@dataclass(frozen=True)
class TickStats:
    picked: int = 0
    enqueued: int = 0
    recovered: int = 0
    reverted: int = 0
    skipped: bool = False


class Scheduler:
    """Single logical ticker; tick bodies never overlap (an overrunning
    tick makes the next one a skip, not a pile-up)."""

    def __init__(
        self,
        store: StreamStore,
        queue: DualQueue,
        config: SchedulerConfig | None = None,
        clock: Callable[[], datetime] = utcnow,
        queue_full_sink: Callable[[QueueMessage], None] | None = None,
    ):
        self.store = store
        self.queue = queue
        self.config = config or SchedulerConfig()
        self.clock = clock
        self._queue_full_sink = queue_full_sink or (lambda msg: None)
        self._tick_guard = threading.Lock()

    def tick(self, now: datetime | None = None) -> TickStats:
        if not self._tick_guard.acquire(blocking=False):
            return TickStats(skipped=True)
        try:
            now = now or self.clock()
            cfg = self.config
            try:
                recovered = self.store.recover_stale(now, cfg.stale_after, cfg.pick_limit)
                picked = self.store.pick_due_streams(now, cfg.horizon, cfg.pick_limit)
            except StoreError:
                logger.exception("tick aborted on store failure; next tick proceeds")
                return TickStats()
            enqueued, reverted = self._enqueue(recovered + picked, now)
            return TickStats(
                picked=len(picked),
                enqueued=enqueued,
                recovered=len(recovered),
                reverted=reverted,
            )
        finally:
            self._tick_guard.release()

    def _enqueue(self, streams: list[FeedStream], now: datetime) -> tuple[int, int]:
        enqueued = 0
        reverted = 0
        queue_full = False
        for idx, stream in enumerate(streams):
            if queue_full:
                reverted += self._revert(stream)
                continue
            sent_for_stream = 0
            for channel in sorted(stream.channels, key=lambda c: c.value):
                msg = make_message(stream.id, channel, Priority.MAIN, now)
                try:
                    self.queue.send(msg)
                    sent_for_stream += 1
                    enqueued += 1
                except QueueFull:
                    queue_full = True
                    logger.warning(
                        "queue full at stream %s; reverting %d unqueued claims",
                        stream.id,
                        len(streams) - idx,
                    )
                    break
            if queue_full and sent_for_stream == 0:
                # Untouched stream goes back to idle for the next cycle; a
                # partially enqueued one stays claimed and completes via the
                # messages that did make it.
                reverted += self._revert(stream)
        return enqueued, reverted

    def _revert(self, stream: FeedStream) -> int:
        try:
            self.store.revert_pick(stream.id)
            return 1
        except Exception:
            logger.exception("could not revert pick for %s", stream.id)
            return 0

    def prioritize(self, stream_id: str, now: datetime | None = None) -> int:
        """Claim a stream immediately, bypassing next_due, and queue
        priority-class messages for each channel. Raises UnknownStream or
        QueueFull (unsent priority work is dead-lettered)."""
        now = now or self.clock()
        stream = self.store.force_pick(stream_id, now)
        sent = 0
        channels = sorted(stream.channels, key=lambda c: c.value)
        for i, channel in enumerate(channels):
            msg = make_message(stream.id, channel, Priority.PRIORITY, now)
            try:
                self.queue.send(msg)
                sent += 1
            except QueueFull:
                self._queue_full_sink(msg)
                for ch in channels[i + 1:]:
                    self._queue_full_sink(make_message(stream.id, ch, Priority.PRIORITY, now))
                if sent == 0:
                    self._revert(stream)
                raise
        return sent


__all__ = [
    "DEFAULT_PICK_LIMIT",
    "DEFAULT_STALE_AFTER_S",
    "DEFAULT_TICK_INTERVAL_S",
    "Scheduler",
    "SchedulerConfig",
    "TickStats",
]
