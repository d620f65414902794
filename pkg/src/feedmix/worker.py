"""Channel processing: conditional GET with redirect handling, RSS/Atom
parsing, dedup insertion and the per-message pipeline that ties them to the
store. Social channels go through adapter URLs against the same fetch
interface instead of live APIs."""

from __future__ import annotations

import logging
import re
import socket
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from email.utils import parsedate_to_datetime
from enum import Enum
from typing import Callable
from urllib.parse import urljoin
from xml.etree import ElementTree

import requests

from . import __version__
from .model import (
    ChannelKind,
    FeedItem,
    FeedStream,
    QueueMessage,
    StreamStatus,
    from_rfc3339,
    item_fingerprint,
)
from .store import KEEP, IllegalTransition, StoreError, StreamStore, UnknownStream

logger = logging.getLogger(__name__)

USER_AGENT = f"feedmix/{__version__}"
MAX_REDIRECT_HOPS = 5
DEFAULT_FETCH_TIMEOUT_S = 10.0

ATOM_NS = "http://www.w3.org/2005/Atom"


class FetchKind(Enum):
    MODIFIED = "modified"
    NOT_MODIFIED = "not_modified"
    FAILED = "failed"


class FailureReason(str, Enum):
    TIMEOUT = "timeout"
    DNS = "dns"
    TLS = "tls"
    HTTP_4XX = "http_4xx"
    HTTP_5XX = "http_5xx"
    TOO_MANY_REDIRECTS = "too_many_redirects"


@dataclass(frozen=True)
class FetchResult:
    kind: FetchKind
    status_code: int
    final_url: str
    hops: int = 0
    permanent_redirect: bool = False
    body: bytes = b""
    etag: str | None = None
    last_modified: str | None = None
    failure: FailureReason | None = None

    @property
    def redirected(self) -> bool:
        return self.hops > 0


class FeedFormat(Enum):
    RSS2 = "rss2"
    ATOM = "atom"


class ParseErrorKind(Enum):
    NOT_XML = "not_xml"
    UNKNOWN_FORMAT = "unknown_format"
    ENCODING_ERROR = "encoding_error"


class ParseError(Exception):
    def __init__(self, kind: ParseErrorKind, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True)
class ParsedItem:
    title: str
    link: str
    guid: str | None = None
    published: datetime | None = None


@dataclass(frozen=True)
class ParsedFeed:
    items: tuple[ParsedItem, ...]
    format: FeedFormat
    title: str | None = None
    skipped: int = 0


@dataclass(frozen=True)
class ProcessOutcome:
    stream_id: str
    items_new: int = 0
    not_modified: bool = False
    failed: str | None = None
    stream_missing: bool = False


_thread_local = threading.local()


def _default_session() -> requests.Session:
    sess = getattr(_thread_local, "session", None)
    if sess is None:
        sess = requests.Session()
        _thread_local.session = sess
    return sess


def _classify_exception(exc: Exception) -> FailureReason:
    if isinstance(exc, requests.exceptions.SSLError):
        return FailureReason.TLS
    if isinstance(exc, requests.exceptions.Timeout):
        return FailureReason.TIMEOUT
    cause: BaseException | None = exc
    for _ in range(10):
        if cause is None:
            break
        if isinstance(cause, socket.gaierror):
            return FailureReason.DNS
        cause = cause.__cause__ or cause.__context__
    if "NameResolution" in repr(exc) or "getaddrinfo" in repr(exc):
        return FailureReason.DNS
    # Connection died some other way (reset, mid-body cut); the reason
    # taxonomy folds transport aborts into the timeout class.
    return FailureReason.TIMEOUT


def fetch_conditional(
    url: str,
    etag: str | None = None,
    last_modified: str | None = None,
    timeout: float = DEFAULT_FETCH_TIMEOUT_S,
    session: requests.Session | None = None,
    user_agent: str = USER_AGENT,
) -> FetchResult:
    """Conditional GET honoring stored validators, following at most 5
    redirect hops, bounded by a total deadline. A 301 anywhere in the chain
    is reported as permanent so the caller can persist the final URL."""
    sess = session or _default_session()
    headers = {"User-Agent": user_agent}
    if etag:
        headers["If-None-Match"] = etag
    if last_modified:
        headers["If-Modified-Since"] = last_modified

    deadline = time.monotonic() + timeout
    current = url
    hops = 0
    permanent = False
    status = 0
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return FetchResult(
                FetchKind.FAILED, status, current, hops, permanent,
                failure=FailureReason.TIMEOUT,
            )
        try:
            resp = sess.get(current, headers=headers, timeout=remaining, allow_redirects=False)
        except requests.RequestException as exc:
            return FetchResult(
                FetchKind.FAILED, status, current, hops, permanent,
                failure=_classify_exception(exc),
            )
        status = resp.status_code
        if status in (301, 302, 303, 307, 308):
            location = resp.headers.get("Location")
            resp.close()
            if not location:
                return FetchResult(
                    FetchKind.FAILED, status, current, hops, permanent,
                    failure=FailureReason.HTTP_5XX,
                )
            permanent = permanent or status in (301, 308)
            hops += 1
            if hops > MAX_REDIRECT_HOPS:
                return FetchResult(
                    FetchKind.FAILED, status, current, MAX_REDIRECT_HOPS, permanent,
                    failure=FailureReason.TOO_MANY_REDIRECTS,
                )
            current = urljoin(current, location)
            continue
        if status == 304:
            resp.close()
            return FetchResult(FetchKind.NOT_MODIFIED, status, current, hops, permanent)
        if 200 <= status < 300:
            try:
                body = resp.content
            except requests.RequestException as exc:
                return FetchResult(
                    FetchKind.FAILED, status, current, hops, permanent,
                    failure=_classify_exception(exc),
                )
            return FetchResult(
                FetchKind.MODIFIED,
                status,
                current,
                hops,
                permanent,
                body=body,
                etag=resp.headers.get("ETag"),
                last_modified=resp.headers.get("Last-Modified"),
            )
        reason = FailureReason.HTTP_4XX if status < 500 else FailureReason.HTTP_5XX
        resp.close()
        return FetchResult(FetchKind.FAILED, status, current, hops, permanent, failure=reason)


_XML_DECL_RE = re.compile(r"^\s*<\?xml[^>]*\?>", re.DOTALL)
_ENCODING_RE = re.compile(rb'<\?xml[^>]*encoding=["\']([A-Za-z0-9._-]+)["\']')


def _decode_body(body: bytes, declared_charset: str | None) -> str:
    charset = declared_charset
    if not charset:
        m = _ENCODING_RE.search(body[:200])
        if m:
            charset = m.group(1).decode("ascii", "replace")
    charset = charset or "utf-8"
    try:
        text = body.decode(charset, errors="replace")
    except LookupError as exc:
        raise ParseError(ParseErrorKind.ENCODING_ERROR, f"unsupported charset {charset!r}") from exc
    # Strip the declaration: ElementTree refuses str input that still
    # carries an encoding declaration.
    return _XML_DECL_RE.sub("", text, count=1)


def _parse_date_rfc822(raw: str | None) -> datetime | None:
    if not raw:
        return None
    try:
        dt = parsedate_to_datetime(raw)
    except (TypeError, ValueError):
        return None
    if dt is None:
        return None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def _parse_date_rfc3339(raw: str | None) -> datetime | None:
    if not raw:
        return None
    try:
        return from_rfc3339(raw.strip())
    except ValueError:
        return None


def _atom_find(el, tag: str):
    found = el.find(f"{{{ATOM_NS}}}{tag}")
    if found is None:
        found = el.find(tag)
    return found


def _atom_findall(el, tag: str):
    return el.findall(f"{{{ATOM_NS}}}{tag}") or el.findall(tag)


def parse_feed(body: bytes, declared_charset: str | None = None) -> ParsedFeed:
    """Parse RSS 2.0 or Atom; entries without both an identifier and a link
    are skipped (counted), document order is preserved."""
    if not body or not body.strip():
        raise ParseError(ParseErrorKind.NOT_XML, "empty body")
    text = _decode_body(body, declared_charset)
    try:
        root = ElementTree.fromstring(text)
    except ElementTree.ParseError as exc:
        raise ParseError(ParseErrorKind.NOT_XML, f"malformed XML: {exc}") from exc

    tag = root.tag.rsplit("}", 1)[-1]
    if tag == "rss":
        return _parse_rss2(root)
    if tag == "feed":
        return _parse_atom(root)
    raise ParseError(ParseErrorKind.UNKNOWN_FORMAT, f"unrecognized root element <{root.tag}>")


def _parse_rss2(root) -> ParsedFeed:
    channel = root.find("channel")
    if channel is None:
        raise ParseError(ParseErrorKind.UNKNOWN_FORMAT, "<rss> without <channel>")
    items: list[ParsedItem] = []
    skipped = 0
    for el in channel.findall("item"):
        guid = (el.findtext("guid") or "").strip() or None
        link = (el.findtext("link") or "").strip()
        if not guid and not link:
            skipped += 1
            continue
        items.append(
            ParsedItem(
                title=(el.findtext("title") or "").strip(),
                link=link,
                guid=guid,
                published=_parse_date_rfc822(el.findtext("pubDate")),
            )
        )
    return ParsedFeed(
        items=tuple(items),
        format=FeedFormat.RSS2,
        title=(channel.findtext("title") or "").strip() or None,
        skipped=skipped,
    )


def _atom_link(entry) -> str:
    candidates = _atom_findall(entry, "link")
    best = ""
    for el in candidates:
        href = (el.get("href") or "").strip()
        if not href:
            continue
        rel = el.get("rel", "alternate")
        if rel == "alternate":
            return href
        if not best:
            best = href
    return best


def _parse_atom(root) -> ParsedFeed:
    items: list[ParsedItem] = []
    skipped = 0
    for entry in _atom_findall(root, "entry"):
        guid_el = _atom_find(entry, "id")
        guid = (guid_el.text or "").strip() if guid_el is not None and guid_el.text else None
        link = _atom_link(entry)
        if not guid and not link:
            skipped += 1
            continue
        title_el = _atom_find(entry, "title")
        updated_el = _atom_find(entry, "updated")
        items.append(
            ParsedItem(
                title=(title_el.text or "").strip() if title_el is not None and title_el.text else "",
                link=link,
                guid=guid,
                published=_parse_date_rfc3339(updated_el.text if updated_el is not None else None),
            )
        )
    title_el = _atom_find(root, "title")
    title = (title_el.text or "").strip() if title_el is not None and title_el.text else None
    return ParsedFeed(items=tuple(items), format=FeedFormat.ATOM, title=title, skipped=skipped)


def channel_url(stream: FeedStream, channel: ChannelKind) -> str:
    """News and custom RSS hit the stream URL directly; the social adapters
    address their simulator-backed endpoint for the same stream."""
    if channel in (ChannelKind.NEWS, ChannelKind.CUSTOM_RSS):
        return stream.url
    sep = "&" if "?" in stream.url else "?"
    return f"{stream.url}{sep}channel={channel.value}"


class ChannelFetchers:
    """Per-channel fetch front: one conditional-GET implementation behind
    every channel kind."""

    def __init__(
        self,
        timeout: float = DEFAULT_FETCH_TIMEOUT_S,
        session_factory: Callable[[], requests.Session] = _default_session,
        user_agent: str = USER_AGENT,
    ):
        self.timeout = timeout
        self.session_factory = session_factory
        self.user_agent = user_agent

    def fetch(self, stream: FeedStream, channel: ChannelKind) -> FetchResult:
        return fetch_conditional(
            channel_url(stream, channel),
            etag=stream.etag,
            last_modified=stream.last_modified,
            timeout=self.timeout,
            session=self.session_factory(),
            user_agent=self.user_agent,
        )


def _mark(store: StreamStore, stream_id: str, outcome: StreamStatus, now: datetime, **kwargs) -> bool:
    try:
        store.mark_processed(stream_id, outcome, now, **kwargs)
        return True
    except IllegalTransition:
        # Another channel (or a stale-recovery twin) already finished this
        # cycle; their mark stands.
        logger.info("mark %s for %s skipped: not in_process", outcome.value, stream_id)
    except UnknownStream:
        logger.info("mark for %s skipped: stream deleted", stream_id)
    except StoreError:
        logger.exception("store failure while marking %s", stream_id)
    return False


def process_message(
    msg: QueueMessage,
    store: StreamStore,
    fetchers: ChannelFetchers,
    clock: Callable[[], datetime],
) -> ProcessOutcome:
    """Process one (stream, channel) unit of work. Never raises: every exit
    path has performed at most one status mark, and the caller completes the
    message afterwards regardless of outcome."""
    try:
        stream = store.get_stream(msg.stream_id)
    except UnknownStream:
        logger.info("message %s references deleted stream %s", msg.message_id, msg.stream_id)
        return ProcessOutcome(msg.stream_id, stream_missing=True)
    except StoreError:
        logger.exception("store failure loading stream %s", msg.stream_id)
        return ProcessOutcome(msg.stream_id, failed="store_error")

    try:
        result = fetchers.fetch(stream, msg.channel)
    except Exception:
        logger.exception("fetch blew up for %s", stream.url)
        _mark(store, stream.id, StreamStatus.FAILED, clock())
        return ProcessOutcome(stream.id, failed="internal_error")

    if result.kind is FetchKind.NOT_MODIFIED:
        _mark(store, stream.id, StreamStatus.PROCESSED, clock())
        return ProcessOutcome(stream.id, not_modified=True)

    if result.kind is FetchKind.FAILED:
        _mark(store, stream.id, StreamStatus.FAILED, clock())
        return ProcessOutcome(stream.id, failed=result.failure.value if result.failure else "failed")

    try:
        parsed = parse_feed(result.body)
    except ParseError as exc:
        logger.warning("unparseable feed from %s: %s", result.final_url, exc)
        _mark(store, stream.id, StreamStatus.FAILED, clock())
        return ProcessOutcome(stream.id, failed=f"parse_{exc.kind.value}")

    now = clock()
    items = [
        FeedItem(
            stream_id=stream.id,
            guid=p.guid,
            link=p.link,
            title=p.title,
            published=p.published,
            fingerprint=item_fingerprint(stream.id, p.guid, p.link),
            ingested_at=now,
        )
        for p in parsed.items
    ]
    try:
        inserted = store.insert_items_dedup(items)
    except StoreError:
        logger.exception("item insert failed for stream %s", stream.id)
        _mark(store, stream.id, StreamStatus.FAILED, clock())
        return ProcessOutcome(stream.id, failed="store_error")

    url_update = KEEP
    if result.permanent_redirect and msg.channel in (ChannelKind.NEWS, ChannelKind.CUSTOM_RSS):
        # Adapter channels decorate the URL; only direct fetches may rewrite it.
        url_update = result.final_url
    _mark(
        store,
        stream.id,
        StreamStatus.PROCESSED,
        clock(),
        etag=result.etag,
        last_modified=result.last_modified,
        url=url_update,
    )
    return ProcessOutcome(stream.id, items_new=inserted)


__all__ = [
    "ChannelFetchers",
    "DEFAULT_FETCH_TIMEOUT_S",
    "FailureReason",
    "FeedFormat",
    "FetchKind",
    "FetchResult",
    "MAX_REDIRECT_HOPS",
    "ParseError",
    "ParseErrorKind",
    "ParsedFeed",
    "ParsedItem",
    "ProcessOutcome",
    "USER_AGENT",
    "channel_url",
    "fetch_conditional",
    "parse_feed",
    "process_message",
]
