"""Queue-to-pool dispatch: a replenishing router that keeps a bounded
number of messages in play, channel worker pools sharing one
priority-stable bounded mailbox each, and a throughput-exploring resizer
that perturbs pool sizes and adopts the historically best one."""

from __future__ import annotations

import logging
import math
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Callable

from .model import ChannelKind, Priority, QueueMessage, utcnow
from .queues import DualQueue, NotInFlight

logger = logging.getLogger(__name__)

DEFAULT_MAILBOX_CAPACITY = 256
DEFAULT_POOL_BOUNDS = (1, 64)
DEFAULT_EXPLORE_PROBABILITY = 0.4
DEFAULT_HISTORY_WINDOWS = 16
DEFAULT_RESIZE_EPOCH_S = 10.0


class UnknownChannel(Exception):
    """Message routed to a channel with no registered pool."""


class RouteResult(Enum):
    DELIVERED = "delivered"
    OVERFLOWED = "overflowed"


@dataclass(frozen=True)
class ReplenishPolicy:
    target_buffer: int = 100
    processed_trigger: int = 25
    timeout_trigger: float = 2.0
    batch_max: int = 10

    def __post_init__(self):
        if self.processed_trigger > self.target_buffer:
            raise ValueError("processed_trigger must not exceed target_buffer")
        if self.batch_max < 1:
            raise ValueError("batch_max must be >= 1")


@dataclass
class RouterState:
    outstanding: int = 0
    processed_since_replenish: int = 0
    last_replenish_at: datetime = field(default_factory=utcnow)


def should_replenish(state: RouterState, policy: ReplenishPolicy, now: datetime) -> bool:
    """Pure trigger check: enough messages processed since the last fetch,
    or too long since it."""
    if state.processed_since_replenish >= policy.processed_trigger:
        return True
    return (now - state.last_replenish_at).total_seconds() >= policy.timeout_trigger


def replenish(
    state: RouterState,
    policy: ReplenishPolicy,
    queue: DualQueue,
    now: datetime,
) -> list[QueueMessage]:
    """Top the buffer back up to target size with bounded receive batches;
    stops early when the queue runs dry."""
    fetched: list[QueueMessage] = []
    shortfall = policy.target_buffer - state.outstanding
    while shortfall > 0:
        batch = queue.receive(min(policy.batch_max, shortfall), now)
        if not batch:
            break
        fetched.extend(batch)
        shortfall -= len(batch)
    state.outstanding += len(fetched)
    state.processed_since_replenish = 0
    state.last_replenish_at = now
    return fetched


def complete(message_id: str, queue: DualQueue, state: RouterState) -> None:
    """Settle one fetched message: delete from the queue (duplicate
    completions after a redelivery race are logged no-ops) and free its
    buffer slot."""
    try:
        queue.delete(message_id)
    except NotInFlight:
        logger.info("duplicate completion for message %s", message_id)
    state.outstanding = max(0, state.outstanding - 1)
    state.processed_since_replenish += 1


class BoundedMailbox:
    """Priority-stable bounded buffer shared by a pool's workers: priority
    class drains before main, FIFO within each class, and offers to a full
    mailbox are refused rather than blocking the producer."""

    def __init__(self, capacity: int = DEFAULT_MAILBOX_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._lock = threading.Lock()
        self._available = threading.Condition(self._lock)
        self._entries: dict[Priority, deque[QueueMessage]] = {
            Priority.PRIORITY: deque(),
            Priority.MAIN: deque(),
        }
        self.high_water = 0

    def __len__(self) -> int:
        with self._lock:
            return self._size()

    def _size(self) -> int:
        return len(self._entries[Priority.PRIORITY]) + len(self._entries[Priority.MAIN])

    def offer(self, msg: QueueMessage) -> bool:
        with self._lock:
            if self._size() >= self.capacity:
                return False
            self._entries[msg.priority].append(msg)
            self.high_water = max(self.high_water, self._size())
            self._available.notify()
            return True

    def take(self, timeout: float = 0.0) -> QueueMessage | None:
        with self._lock:
            if self._size() == 0:
                if timeout <= 0:
                    return None
                self._available.wait(timeout)
            for cls in (Priority.PRIORITY, Priority.MAIN):
                q = self._entries[cls]
                if q:
                    return q.popleft()
            return None


def route(msg: QueueMessage, pools: dict[ChannelKind, "WorkerPool"]) -> RouteResult:
    """Append to the channel pool's shared mailbox; a full mailbox diverts
    the message to the dead-letter sink and reports the overflow."""
    pool = pools.get(msg.channel)
    if pool is None:
        raise UnknownChannel(msg.channel.value)
    if pool.mailbox.offer(msg):
        return RouteResult.DELIVERED
    pool.report_overflow(msg)
    return RouteResult.OVERFLOWED


@dataclass(frozen=True)
class WindowSample:
    size: int
    completed: int
    window: float

    @property
    def throughput(self) -> float:
        return self.completed / self.window if self.window > 0 else 0.0


@dataclass
class PoolStats:
    current_size: int = 1
    bounds: tuple[int, int] = DEFAULT_POOL_BOUNDS
    explore_probability: float = DEFAULT_EXPLORE_PROBABILITY
    rng_seed: int = 0
    history_windows: int = DEFAULT_HISTORY_WINDOWS

    def __post_init__(self):
        lo, hi = self.bounds
        if not (lo <= self.current_size <= hi):
            raise ValueError(f"current_size {self.current_size} outside bounds {self.bounds}")
        self.history: deque[WindowSample] = deque(maxlen=self.history_windows)
        self.rng = random.Random(self.rng_seed)


def resize_epoch(stats: PoolStats, completed_in_window: int, window: float) -> int:
    """One adjustment step: record the finished window, then either explore
    (random bounded step from the current size) or exploit (jump to the
    highest-throughput size seen, smaller size winning ties)."""
    stats.history.append(WindowSample(stats.current_size, completed_in_window, window))
    lo, hi = stats.bounds
    if stats.rng.random() < stats.explore_probability:
        max_step = max(1, math.ceil(0.1 * (hi - lo)))
        step = stats.rng.randint(1, max_step)
        direction = stats.rng.choice((-1, 1))
        new_size = stats.current_size + direction * step
    else:
        best = max(stats.history, key=lambda s: (s.throughput, -s.size))
        new_size = best.size
    new_size = max(lo, min(hi, new_size))
    stats.current_size = new_size
    return new_size


class WorkerPool:
    """A balancing pool: N workers all consuming the channel's shared
    mailbox, so idle workers absorb load naturally. Size changes apply at
    epoch boundaries; retiring workers finish their current message."""

    def __init__(
        self,
        channel: ChannelKind,
        handler: Callable[[QueueMessage], object],
        completer: Callable[[QueueMessage], None],
        capacity: int = DEFAULT_MAILBOX_CAPACITY,
        stats: PoolStats | None = None,
        dead_letter: Callable[[QueueMessage], None] | None = None,
    ):
        self.channel = channel
        self.mailbox = BoundedMailbox(capacity)
        self.stats = stats or PoolStats()
        self._handler = handler
        self._completer = completer
        self._dead_letter = dead_letter or (lambda msg: None)
        self._lock = threading.Lock()
        self._completed_window = 0
        self.completed_total = 0
        self.overflow_total = 0
        self._workers: list[tuple[threading.Thread, threading.Event]] = []
        self._started = False

    # -- execution -------------------------------------------------------------

    def _execute(self, msg: QueueMessage) -> None:
        try:
            self._handler(msg)
        except Exception:
            logger.exception("handler failed for message %s", msg.message_id)
        finally:
            try:
                self._completer(msg)
            except Exception:
                logger.exception("completion failed for message %s", msg.message_id)
            with self._lock:
                self._completed_window += 1
                self.completed_total += 1

    def run_one(self) -> bool:
        """Synchronous drive for tests and harnesses: process at most one
        mailbox entry on the calling thread."""
        msg = self.mailbox.take(timeout=0)
        if msg is None:
            return False
        self._execute(msg)
        return True

    def run_available(self) -> int:
        n = 0
        while self.run_one():
            n += 1
        return n

    def report_overflow(self, msg: QueueMessage) -> None:
        with self._lock:
            self.overflow_total += 1
        self._dead_letter(msg)

    # -- sizing ------------------------------------------------------------------

    def resize_tick(self, window: float = DEFAULT_RESIZE_EPOCH_S) -> int:
        with self._lock:
            completed = self._completed_window
            self._completed_window = 0
        new_size = resize_epoch(self.stats, completed, window)
        if self._started:
            self._apply_size(new_size)
        return new_size

    def _worker_loop(self, stop: threading.Event) -> None:
        while not stop.is_set():
            msg = self.mailbox.take(timeout=0.05)
            if msg is not None:
                self._execute(msg)

    def _spawn(self) -> None:
        stop = threading.Event()
        t = threading.Thread(
            target=self._worker_loop,
            args=(stop,),
            name=f"pool-{self.channel.value}-{len(self._workers)}",
            daemon=True,
        )
        self._workers.append((t, stop))
        t.start()

    def _apply_size(self, n: int) -> None:
        while len(self._workers) < n:
            self._spawn()
        while len(self._workers) > n:
            _, stop = self._workers.pop()
            stop.set()

    def start(self) -> None:
        self._started = True
        self._apply_size(self.stats.current_size)

    def stop(self, join_timeout: float = 2.0) -> None:
        self._started = False
        workers, self._workers = self._workers, []
        for _, stop in workers:
            stop.set()
        for t, _ in workers:
            t.join(join_timeout)


class FeedRouter:
    """Pulls batches from the dual queue under the replenish policy and
    routes them into channel pools. Overflowed messages free their buffer
    slot but stay undeleted, so the visibility timeout redelivers them."""

    def __init__(
        self,
        queue: DualQueue,
        pools: dict[ChannelKind, WorkerPool],
        policy: ReplenishPolicy | None = None,
        unroutable_sink: Callable[[QueueMessage], None] | None = None,
        clock: Callable[[], datetime] = utcnow,
    ):
        self.queue = queue
        self.pools = pools
        self.policy = policy or ReplenishPolicy()
        self.clock = clock
        self.state = RouterState(last_replenish_at=clock())
        self._unroutable_sink = unroutable_sink or (lambda msg: None)
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def poll_once(self, now: datetime | None = None) -> int:
        now = now or self.clock()
        with self._lock:
            if not should_replenish(self.state, self.policy, now):
                return 0
            batch = replenish(self.state, self.policy, self.queue, now)
        for msg in batch:
            self.dispatch(msg)
        return len(batch)

    def dispatch(self, msg: QueueMessage) -> RouteResult:
        try:
            result = route(msg, self.pools)
        except UnknownChannel:
            # Unroutable work can never succeed; settle it so the queue does
            # not redeliver forever, and leave the trail in the dead letters.
            logger.error("no pool for channel %s; dead-lettering", msg.channel.value)
            self._unroutable_sink(msg)
            with self._lock:
                try:
                    self.queue.delete(msg.message_id)
                except NotInFlight:
                    pass
                self.state.outstanding = max(0, self.state.outstanding - 1)
            return RouteResult.OVERFLOWED
        if result is RouteResult.OVERFLOWED:
            with self._lock:
                self.state.outstanding = max(0, self.state.outstanding - 1)
        return result

    def on_complete(self, msg: QueueMessage) -> None:
        with self._lock:
            complete(msg.message_id, self.queue, self.state)

    # -- threaded operation --------------------------------------------------

    def _loop(self, poll_interval: float) -> None:
        while not self._stop.is_set():
            try:
                fetched = self.poll_once()
            except Exception:
                logger.exception("router poll failed")
                fetched = 0
            if fetched == 0:
                self._stop.wait(poll_interval)

    def start(self, poll_interval: float = 0.05) -> None:
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, args=(poll_interval,), name="feed-router", daemon=True)
        self._thread.start()

    def stop(self, join_timeout: float = 2.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(join_timeout)
            self._thread = None


__all__ = [
    "BoundedMailbox",
    "DEFAULT_EXPLORE_PROBABILITY",
    "DEFAULT_HISTORY_WINDOWS",
    "DEFAULT_MAILBOX_CAPACITY",
    "DEFAULT_POOL_BOUNDS",
    "DEFAULT_RESIZE_EPOCH_S",
    "FeedRouter",
    "PoolStats",
    "ReplenishPolicy",
    "RouteResult",
    "RouterState",
    "UnknownChannel",
    "WindowSample",
    "WorkerPool",
    "complete",
    "replenish",
    "resize_epoch",
    "route",
    "should_replenish",
]
