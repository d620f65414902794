"""Dead-letter capture and fixed-window throughput metrics: contiguous
clock-aligned buckets of sent/received/deleted/dead-lettered/ingested
counts, a bounded ring of recent dead letters, and a per-bucket threshold
alert emitted as a structured log line plus an optional webhook POST."""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Callable

import requests

from .model import QueueMessage, from_rfc3339, to_rfc3339, utcnow
from .queues import QueueCounters

logger = logging.getLogger(__name__)

DEFAULT_BUCKET_WINDOW_S = 300.0
DEFAULT_DEAD_LETTER_THRESHOLD = 100
DEFAULT_RING_SIZE = 10_000

CSV_COLUMNS = "window_start,sent,received,deleted,dead_lettered,items_ingested"


class DeadLetterReason(str, Enum):
    MAILBOX_OVERFLOW = "mailbox_overflow"
    QUEUE_FULL = "queue_full"
    UNROUTABLE = "unroutable"


@dataclass(frozen=True)
class DeadLetterRecord:
    message: QueueMessage
    reason: DeadLetterReason
    at: datetime


@dataclass(frozen=True)
class MetricsBucket:
    window_start: datetime
    window: float
    sent: int = 0
    received: int = 0
    deleted: int = 0
    dead_lettered: int = 0
    items_ingested: int = 0


@dataclass(frozen=True)
class Alert:
    reason: str
    window_start: datetime | None
    count: int


def check_alert(
    window_dead_letters: int,
    threshold: int,
    window_start: datetime | None = None,
) -> Alert | None:
    """Strictly-over-threshold check, evaluated once per bucket close, so a
    bad bucket produces exactly one alert."""
    if window_dead_letters > threshold:
        return Alert(reason="dead_letters", window_start=window_start, count=window_dead_letters)
    return None


def align_window_start(ts: datetime, window: float) -> datetime:
    epoch = ts.timestamp()
    start = (epoch // window) * window
    return datetime.fromtimestamp(start, tz=timezone.utc)


@dataclass(frozen=True)
class _Sample:
    counters: QueueCounters
    items_total: int


class Monitor:
    """Aggregates queue/store counter snapshots into contiguous buckets.
    Counter sampling happens at bucket close, so sums across buckets always
    telescope back to the lifetime counters."""

    def __init__(
        self,
        queue=None,
        store=None,
        window: float = DEFAULT_BUCKET_WINDOW_S,
        dead_letter_threshold: int = DEFAULT_DEAD_LETTER_THRESHOLD,
        ring_size: int = DEFAULT_RING_SIZE,
        alert_webhook_url: str | None = None,
        clock: Callable[[], datetime] = utcnow,
        post_func: Callable = requests.post,
    ):
        self.queue = queue
        self.store = store
        self.window = window
        self.dead_letter_threshold = dead_letter_threshold
        self.alert_webhook_url = alert_webhook_url
        self.clock = clock
        self._post = post_func
        self._lock = threading.Lock()
        self.ring: deque[DeadLetterRecord] = deque(maxlen=ring_size)
        self.dead_letter_total = 0
        self.alerts: list[Alert] = []
        self._closed: list[MetricsBucket] = []
        self._open_start = align_window_start(clock(), window)
        self._open_dead = 0
        self._baseline = self._sample()

    # -- sampling ----------------------------------------------------------

    def _sample(self) -> _Sample:
        counters = self.queue.counters() if self.queue is not None else QueueCounters()
        items = self.store.count_items() if self.store is not None else 0
        return _Sample(counters, items)

    def _delta_bucket(self, start: datetime, sample: _Sample, dead: int) -> MetricsBucket:
        base = self._baseline
        return MetricsBucket(
            window_start=start,
            window=self.window,
            sent=sample.counters.sent - base.counters.sent,
            received=sample.counters.received - base.counters.received,
            deleted=sample.counters.deleted - base.counters.deleted,
            dead_lettered=dead,
            items_ingested=sample.items_total - base.items_total,
        )

    # -- recording -----------------------------------------------------------

    def record_dead_letter(self, rec: DeadLetterRecord) -> None:
        self.roll(rec.at)
        with self._lock:
            self.ring.append(rec)
            self.dead_letter_total += 1
            self._open_dead += 1
        logger.info(
            "%s",
            json.dumps(
                {
                    "event": "dead_letter",
                    "reason": rec.reason.value,
                    "message_id": rec.message.message_id,
                    "stream_id": rec.message.stream_id,
                    "channel": rec.message.channel.value,
                    "at": to_rfc3339(rec.at),
                }
            ),
        )

    def roll(self, now: datetime | None = None) -> None:
        """Close every window that has fully elapsed; gaps become zero
        buckets so the series stays contiguous."""
        now = now or self.clock()
        to_emit: list[Alert] = []
        with self._lock:
            while True:
                open_end = self._open_start + timedelta(seconds=self.window)
                if now < open_end:
                    break
                sample = self._sample()
                bucket = self._delta_bucket(self._open_start, sample, self._open_dead)
                self._closed.append(bucket)
                alert = check_alert(bucket.dead_lettered, self.dead_letter_threshold, bucket.window_start)
                if alert is not None:
                    self.alerts.append(alert)
                    to_emit.append(alert)
                self._baseline = sample
                self._open_start = open_end
                self._open_dead = 0
        for alert in to_emit:
            self._emit_alert(alert)

    def _emit_alert(self, alert: Alert) -> None:
        payload = {
            "reason": alert.reason,
            "bucket": to_rfc3339(alert.window_start) if alert.window_start else None,
            "count": alert.count,
        }
        logger.warning("%s", json.dumps({"event": "alert", **payload}))
        if not self.alert_webhook_url:
            return
        try:
            self._post(self.alert_webhook_url, json=payload, timeout=2.0)
        except Exception as exc:
            logger.warning("alert webhook failed: %s", exc)

    # -- reading ----------------------------------------------------------------

    def snapshot(self, window_count: int | None = None) -> list[MetricsBucket]:
        """Most recent N closed buckets plus the open one."""
        with self._lock:
            open_bucket = self._delta_bucket(self._open_start, self._sample(), self._open_dead)
            closed = self._closed if window_count is None else self._closed[-window_count:]
            return list(closed) + [open_bucket]

    def closed_buckets(self) -> list[MetricsBucket]:
        with self._lock:
            return list(self._closed)

    def to_csv(self, path: str | Path, window_count: int | None = None) -> int:
        buckets = self.snapshot(window_count)
        write_csv(buckets, path)
        return len(buckets)


def write_csv(buckets: list[MetricsBucket], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(CSV_COLUMNS + "\n")
        for b in buckets:
            f.write(
                f"{to_rfc3339(b.window_start)},{b.sent},{b.received},"
                f"{b.deleted},{b.dead_lettered},{b.items_ingested}\n"
            )


def buckets_from_json(docs: list[dict]) -> list[MetricsBucket]:
    return [
        MetricsBucket(
            window_start=from_rfc3339(d["window_start"]),
            window=float(d["window"]),
            sent=int(d["sent"]),
            received=int(d["received"]),
            deleted=int(d["deleted"]),
            dead_lettered=int(d["dead_lettered"]),
            items_ingested=int(d["items_ingested"]),
        )
        for d in docs
    ]


def bucket_to_json(b: MetricsBucket) -> dict:
    return {
        "window_start": to_rfc3339(b.window_start),
        "window": b.window,
        "sent": b.sent,
        "received": b.received,
        "deleted": b.deleted,
        "dead_lettered": b.dead_lettered,
        "items_ingested": b.items_ingested,
    }


__all__ = [
    "Alert",
    "CSV_COLUMNS",
    "DEFAULT_BUCKET_WINDOW_S",
    "DEFAULT_DEAD_LETTER_THRESHOLD",
    "DEFAULT_RING_SIZE",
    "DeadLetterReason",
    "DeadLetterRecord",
    "MetricsBucket",
    "Monitor",
    "align_window_start",
    "bucket_to_json",
    "buckets_from_json",
    "check_alert",
    "write_csv",
]
