"""Domain types shared by every pipeline stage, plus the pure scheduling
and fingerprinting helpers they rely on."""

from __future__ import annotations

import hashlib
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from urllib.parse import urlsplit

DEFAULT_POLL_INTERVAL_S = 300.0
MIN_POLL_INTERVAL_S = 1.0


class StreamStatus(str, Enum):
    IDLE = "idle"
    IN_PROCESS = "in_process"
    PROCESSED = "processed"
    FAILED = "failed"


# Forward edges only; rollbacks (queue-full unpick) restore the prior value
# outside this table.
LEGAL_TRANSITIONS = frozenset(
    {
        (StreamStatus.IDLE, StreamStatus.IN_PROCESS),
        (StreamStatus.IN_PROCESS, StreamStatus.PROCESSED),
        (StreamStatus.IN_PROCESS, StreamStatus.FAILED),
        (StreamStatus.PROCESSED, StreamStatus.IN_PROCESS),
        (StreamStatus.FAILED, StreamStatus.IN_PROCESS),
        # stale re-pick
        (StreamStatus.IN_PROCESS, StreamStatus.IN_PROCESS),
    }
)


def can_transition(current: StreamStatus, target: StreamStatus) -> bool:
    return (current, target) in LEGAL_TRANSITIONS


class ChannelKind(str, Enum):
    NEWS = "news"
    CUSTOM_RSS = "custom_rss"
    # Served by simulator-backed adapters; no live social API calls here.
    FACEBOOK = "facebook"
    TWITTER = "twitter"


class Priority(str, Enum):
    MAIN = "main"
    PRIORITY = "priority"


class InvalidItem(ValueError):
    """Raised when an item carries neither a guid nor a link."""


class ValidationError(ValueError):
    """Stream record rejected; `kind` is one of invalid_url / no_channels /
    bad_interval and `field` names the offending field."""

    INVALID_URL = "invalid_url"
    NO_CHANNELS = "no_channels"
    BAD_INTERVAL = "bad_interval"

    def __init__(self, kind: str, fieldname: str, message: str):
        super().__init__(message)
        self.kind = kind
        self.field = fieldname


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def to_rfc3339(ts: datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def from_rfc3339(raw: str) -> datetime:
    ts = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass(frozen=True)
class FeedStream:
    """A registered source: where to poll, through which channels, and when
    it is next due."""

    id: str
    url: str
    channels: frozenset[ChannelKind]
    poll_interval: float = DEFAULT_POLL_INTERVAL_S
    next_due: datetime = field(default_factory=utcnow)
    status: StreamStatus = StreamStatus.IDLE
    picked_at: datetime | None = None
    etag: str | None = None
    last_modified: str | None = None
    consecutive_failures: int = 0
    created_at: datetime = field(default_factory=utcnow)

    def __post_init__(self):
        if self.status is StreamStatus.IN_PROCESS and self.picked_at is None:
            raise ValueError("in_process stream must carry picked_at")
        if self.poll_interval < MIN_POLL_INTERVAL_S:
            raise ValueError("poll_interval below 1s")
        if not self.channels:
            raise ValueError("channels must be non-empty")
        if self.consecutive_failures < 0:
            raise ValueError("consecutive_failures must be non-negative")


@dataclass(frozen=True)
class FeedItem:
    """One parsed entry with its dedup fingerprint."""

    stream_id: str
    link: str
    title: str
    fingerprint: str
    ingested_at: datetime
    guid: str | None = None
    published: datetime | None = None

    def __post_init__(self):
        if not self.guid and not self.link:
            raise InvalidItem("item needs a guid or a link")


@dataclass(frozen=True)
class QueueMessage:
    """A unit of work: poll one stream through one channel."""

    message_id: str
    stream_id: str
    channel: ChannelKind
    priority: Priority
    enqueued_at: datetime
    receive_count: int = 0


def make_message(
    stream_id: str,
    channel: ChannelKind,
    priority: Priority,
    now: datetime,
) -> QueueMessage:
    return QueueMessage(
        message_id=uuid.uuid4().hex,
        stream_id=stream_id,
        channel=channel,
        priority=priority,
        enqueued_at=now,
    )


def compute_next_due(completed_at: datetime, poll_interval: float) -> datetime:
    """Next poll time: completion time plus the per-stream interval, so slow
    fetches can never self-overlap."""
    if poll_interval < MIN_POLL_INTERVAL_S:
        raise ValueError("poll_interval below 1s")
    return completed_at + timedelta(seconds=poll_interval)


def item_fingerprint(stream_id: str, guid: str | None, link: str) -> str:
    """Dedup key: SHA-256 over `stream_id|identity` where identity is the
    guid when present, otherwise the link."""
    identity = guid if guid else link
    if not identity:
        raise InvalidItem("item needs a guid or a link")
    preimage = f"{stream_id}|{identity}"
    return hashlib.sha256(preimage.encode("utf-8")).hexdigest()


def _coerce_channels(raw) -> frozenset[ChannelKind]:
    out = set()
    for c in raw:
        out.add(c if isinstance(c, ChannelKind) else ChannelKind(str(c)))
    return frozenset(out)


def validate_stream(candidate: dict | FeedStream, now: datetime | None = None) -> FeedStream:
    """Normalize a stream-like record into a FeedStream, applying the
    defaults (300s interval, idle status, due now). Raises ValidationError
    naming the bad field. Idempotent on already-valid streams."""
    now = now or utcnow()
    if isinstance(candidate, FeedStream):
        raw: dict = {
            "id": candidate.id,
            "url": candidate.url,
            "channels": candidate.channels,
            "poll_interval": candidate.poll_interval,
            "next_due": candidate.next_due,
            "status": candidate.status,
            "picked_at": candidate.picked_at,
            "etag": candidate.etag,
            "last_modified": candidate.last_modified,
            "consecutive_failures": candidate.consecutive_failures,
            "created_at": candidate.created_at,
        }
    else:
        raw = dict(candidate)

    url = str(raw.get("url") or "")
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.netloc:
        raise ValidationError(ValidationError.INVALID_URL, "url", f"not an absolute http(s) URL: {url!r}")

    try:
        channels = _coerce_channels(raw.get("channels") or ())
    except ValueError as exc:
        raise ValidationError(ValidationError.NO_CHANNELS, "channels", str(exc))
    if not channels:
        raise ValidationError(ValidationError.NO_CHANNELS, "channels", "channels must be non-empty")

    interval = raw.get("poll_interval")
    interval = DEFAULT_POLL_INTERVAL_S if interval is None else float(interval)
    if interval < MIN_POLL_INTERVAL_S:
        raise ValidationError(ValidationError.BAD_INTERVAL, "poll_interval", f"poll_interval {interval} below 1s")

    status = raw.get("status") or StreamStatus.IDLE
    status = status if isinstance(status, StreamStatus) else StreamStatus(str(status))

    def _ts(key, default=None):
        v = raw.get(key, default)
        if v is None:
            return None
        return v if isinstance(v, datetime) else from_rfc3339(str(v))

    return FeedStream(
        id=str(raw.get("id") or uuid.uuid4().hex),
        url=url,
        channels=channels,
        poll_interval=interval,
        next_due=_ts("next_due") or now,
        status=status,
        picked_at=_ts("picked_at"),
        etag=raw.get("etag"),
        last_modified=raw.get("last_modified"),
        consecutive_failures=int(raw.get("consecutive_failures") or 0),
        created_at=_ts("created_at") or now,
    )


def stream_to_json(s: FeedStream) -> dict:
    """Wire form: exact snake_case field names, RFC-3339 timestamps."""
    return {
        "id": s.id,
        "url": s.url,
        "channels": sorted(c.value for c in s.channels),
        "poll_interval": s.poll_interval,
        "next_due": to_rfc3339(s.next_due),
        "status": s.status.value,
        "picked_at": to_rfc3339(s.picked_at) if s.picked_at else None,
        "etag": s.etag,
        "last_modified": s.last_modified,
        "consecutive_failures": s.consecutive_failures,
        "created_at": to_rfc3339(s.created_at),
    }


def stream_from_json(doc: dict) -> FeedStream:
    return FeedStream(
        id=doc["id"],
        url=doc["url"],
        channels=_coerce_channels(doc["channels"]),
        poll_interval=float(doc["poll_interval"]),
        next_due=from_rfc3339(doc["next_due"]),
        status=StreamStatus(doc["status"]),
        picked_at=from_rfc3339(doc["picked_at"]) if doc.get("picked_at") else None,
        etag=doc.get("etag"),
        last_modified=doc.get("last_modified"),
        consecutive_failures=int(doc.get("consecutive_failures", 0)),
        created_at=from_rfc3339(doc["created_at"]),
    )


def item_to_json(it: FeedItem) -> dict:
    return {
        "stream_id": it.stream_id,
        "guid": it.guid,
        "link": it.link,
        "title": it.title,
        "published": to_rfc3339(it.published) if it.published else None,
        "fingerprint": it.fingerprint,
        "ingested_at": to_rfc3339(it.ingested_at),
    }


def item_from_json(doc: dict) -> FeedItem:
    return FeedItem(
        stream_id=doc["stream_id"],
        guid=doc.get("guid"),
        link=doc["link"],
        title=doc["title"],
        published=from_rfc3339(doc["published"]) if doc.get("published") else None,
        fingerprint=doc["fingerprint"],
        ingested_at=from_rfc3339(doc["ingested_at"]),
    )


__all__ = [
    "ChannelKind",
    "FeedItem",
    "FeedStream",
    "InvalidItem",
    "LEGAL_TRANSITIONS",
    "Priority",
    "QueueMessage",
    "StreamStatus",
    "ValidationError",
    "can_transition",
    "compute_next_due",
    "from_rfc3339",
    "item_fingerprint",
    "item_from_json",
    "item_to_json",
    "make_message",
    "stream_from_json",
    "stream_to_json",
    "to_rfc3339",
    "utcnow",
    "validate_stream",
]
