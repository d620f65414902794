"""Shared test helpers: a manual clock, stream/message factories, and the
reference queue model used by the conformance schedules."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

from feedmix.model import (
    ChannelKind,
    FeedItem,
    FeedStream,
    Priority,
    QueueMessage,
    StreamStatus,
    item_fingerprint,
)

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)

ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, name: str, ok: bool, detail: str = "") -> None:
    """One line per acceptance criterion, echoed into the terminal summary."""
    status = "PASS" if ok else "FAIL"
    line = f"ACCEPTANCE {criterion} {status}: {name}" + (f" [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert ok, line


class ManualClock:
    """Callable clock for paused/accelerated-time harnesses."""

    def __init__(self, start: datetime = T0):
        self._now = start

    def __call__(self) -> datetime:
        return self._now

    def now(self) -> datetime:
        return self._now

    def advance(self, seconds: float) -> datetime:
        self._now += timedelta(seconds=seconds)
        return self._now


def make_stream(
    stream_id: str = "s1",
    url: str = "https://feeds.example/rss",
    channels=frozenset({ChannelKind.NEWS}),
    poll_interval: float = 300.0,
    next_due: datetime = T0,
    status: StreamStatus = StreamStatus.IDLE,
    picked_at: datetime | None = None,
    **kwargs,
) -> FeedStream:
    return FeedStream(
        id=stream_id,
        url=url,
        channels=frozenset(channels),
        poll_interval=poll_interval,
        next_due=next_due,
        status=status,
        picked_at=picked_at,
        created_at=kwargs.pop("created_at", T0),
        **kwargs,
    )


_msg_counter = [0]


def make_msg(
    stream_id: str = "s1",
    channel: ChannelKind = ChannelKind.NEWS,
    priority: Priority = Priority.MAIN,
    enqueued_at: datetime = T0,
    message_id: str | None = None,
) -> QueueMessage:
    _msg_counter[0] += 1
    return QueueMessage(
        message_id=message_id or f"m{_msg_counter[0]:06d}",
        stream_id=stream_id,
        channel=channel,
        priority=priority,
        enqueued_at=enqueued_at,
    )


def make_item(stream_id: str, guid: str | None, link: str, ingested_at: datetime = T0) -> FeedItem:
    return FeedItem(
        stream_id=stream_id,
        guid=guid,
        link=link,
        title=f"item {guid or link}",
        fingerprint=item_fingerprint(stream_id, guid, link),
        ingested_at=ingested_at,
    )


@dataclass
class ReferenceQueueModel:
    """Independent specification model of the dual queue used to check the
    implementation over random schedules: plain lists, explicit visibility
    bookkeeping, nothing shared with the implementation."""

    visibility_timeout: float
    capacity: int = 10_000
    visible: dict = field(default_factory=lambda: {Priority.PRIORITY: [], Priority.MAIN: []})
    in_flight: dict = field(default_factory=dict)  # id -> (seq, msg_id, cls, expiry)
    deleted: set = field(default_factory=set)
    sent_order: int = 0

    def send(self, msg_id: str, cls: Priority) -> bool:
        total = len(self.visible[Priority.PRIORITY]) + len(self.visible[Priority.MAIN]) + len(self.in_flight)
        if total >= self.capacity:
            return False
        self.sent_order += 1
        self.visible[cls].append((self.sent_order, msg_id))
        return True

    def _reclaim(self, now: float) -> None:
        expired = sorted(
            [v for v in self.in_flight.values() if v[3] <= now],
            key=lambda v: v[0],
        )
        for seq, msg_id, cls, _ in reversed(expired):
            del self.in_flight[msg_id]
            self.visible[cls].insert(0, (seq, msg_id))

    def receive(self, max_messages: int, now: float) -> list:
        self._reclaim(now)
        out = []
        for cls in (Priority.PRIORITY, Priority.MAIN):
            while self.visible[cls] and len(out) < max_messages:
                seq, msg_id = self.visible[cls].pop(0)
                self.in_flight[msg_id] = (seq, msg_id, cls, now + self.visibility_timeout)
                out.append(msg_id)
        return out

    def delete(self, msg_id: str) -> bool:
        if msg_id in self.in_flight:
            del self.in_flight[msg_id]
            self.deleted.add(msg_id)
            return True
        return False

    def depths(self) -> tuple[int, int, int]:
        return (
            len(self.visible[Priority.MAIN]),
            len(self.visible[Priority.PRIORITY]),
            len(self.in_flight),
        )


def run_queue_schedule(rng: random.Random, n_ops: int = 15):
    """One random schedule executed against both the implementation and the
    reference model; returns a list of mismatch descriptions (empty = ok)."""
    from feedmix.queues import DualQueue, NotInFlight, QueueFull

    vis_timeout = rng.choice([5.0, 30.0])
    q = DualQueue(capacity=50, visibility_timeout=vis_timeout)
    model = ReferenceQueueModel(visibility_timeout=vis_timeout, capacity=50)
    now = T0
    clock_s = 0.0
    live_ids: list[str] = []
    mismatches: list[str] = []
    sent_n = 0

    for _ in range(n_ops):
        op = rng.random()
        if op < 0.45:
            sent_n += 1
            cls = Priority.PRIORITY if rng.random() < 0.3 else Priority.MAIN
            msg = make_msg(priority=cls, message_id=f"sched{id(q)}-{sent_n}")
            try:
                q.send(msg)
                ok_impl = True
            except QueueFull:
                ok_impl = False
            ok_model = model.send(msg.message_id, cls)
            if ok_impl != ok_model:
                mismatches.append(f"send acceptance diverged for {msg.message_id}")
            elif ok_impl:
                live_ids.append(msg.message_id)
        elif op < 0.75:
            n = rng.randint(1, 8)
            got = [m.message_id for m in q.receive(n, now)]
            want = model.receive(n, clock_s)
            if got != want:
                mismatches.append(f"receive order diverged: {got} != {want}")
        elif op < 0.9 and live_ids:
            msg_id = rng.choice(live_ids)
            try:
                q.delete(msg_id)
                ok_impl = True
            except NotInFlight:
                ok_impl = False
            ok_model = model.delete(msg_id)
            if ok_impl != ok_model:
                mismatches.append(f"delete outcome diverged for {msg_id}")
        else:
            dt = rng.choice([1.0, 10.0, 40.0])
            now = now + timedelta(seconds=dt)
            clock_s += dt

        d = q.depths()
        want_d = model.depths()
        if (d.visible_main, d.visible_priority, d.in_flight) != want_d:
            mismatches.append(f"depths diverged: {d} != {want_d}")
        counters = q.counters()
        if counters.sent != d.visible + d.in_flight + counters.deleted:
            mismatches.append("conservation violated")
    return mismatches


def run_pick_race(store, trials: int, n_streams: int = 100) -> list[str]:
    """Race two concurrent pickers over `n_streams` due streams, `trials`
    times; returns violation descriptions (empty = atomicity held)."""
    import threading

    from feedmix.model import StreamStatus
    from dataclasses import replace

    violations: list[str] = []
    ids = [f"race{i:04d}" for i in range(n_streams)]
    for i in ids:
        store.upsert_stream(make_stream(i, next_due=T0))

    for trial in range(trials):
        results: list[list] = [[], []]
        barrier = threading.Barrier(2)

        def picker(slot):
            barrier.wait()
            results[slot] = store.pick_due_streams(T0, 5.0, n_streams)

        threads = [threading.Thread(target=picker, args=(i,)) for i in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        got_a = {s.id for s in results[0]}
        got_b = {s.id for s in results[1]}
        if got_a & got_b:
            violations.append(f"trial {trial}: double-picked {sorted(got_a & got_b)[:5]}")
        if got_a | got_b != set(ids):
            violations.append(f"trial {trial}: union missing {len(ids) - len(got_a | got_b)}")
        # reset for the next trial
        for i in ids:
            s = store.get_stream(i)
            store.upsert_stream(replace(s, status=StreamStatus.IDLE, picked_at=None, next_due=T0))
    return violations
