"""Deterministic synthetic feed-source server: parameterized RSS/Atom feeds
over local HTTP with ETag/304, redirect chains, controlled duplicates,
fault injection and per-request logging. Identical (scenario, seed) and
request sequence reproduce byte-identical responses, which makes this the
ground truth for the end-to-end tests."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from email.utils import format_datetime
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import urlsplit
from xml.sax.saxutils import escape

logger = logging.getLogger(__name__)

# Fixed epoch for generated publish dates; keeps bodies byte-stable.
ITEM_EPOCH = datetime(2000, 1, 1, tzinfo=timezone.utc)

# Links inside generated feeds are never fetched; a reserved domain keeps
# them independent of the ephemeral server port.
ITEM_LINK_BASE = "http://feedsim.invalid"


class ValidatorMode(str, Enum):
    HONOR_ETAG = "honor_etag"
    HONOR_LAST_MODIFIED = "honor_last_modified"
    IGNORE = "ignore"


class FaultKind(str, Enum):
    TIMEOUT = "timeout"
    HTTP_500 = "http_500"
    MID_BODY_CUT = "mid_body_cut"


class StartupError(Exception):
    """Simulator could not bind its port."""


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    probability: float


@dataclass(frozen=True)
class SimScenario:
    feed_count: int
    items_per_poll: int | tuple = 3
    validator_mode: ValidatorMode = ValidatorMode.HONOR_ETAG
    redirect_hops: int = 0
    duplicate_fraction: float = 0.0
    fault: FaultSpec | None = None
    service_delay: float | tuple = 0.0
    rng_seed: int = 0
    feed_format: str = "rss2"

    def to_json(self) -> dict:
        doc = {
            "feed_count": self.feed_count,
            "items_per_poll": self.items_per_poll
            if isinstance(self.items_per_poll, int)
            else {"poisson": self.items_per_poll[1]},
            "validator_mode": self.validator_mode.value,
            "redirect_hops": self.redirect_hops,
            "duplicate_fraction": self.duplicate_fraction,
            "fault": None
            if self.fault is None
            else {"kind": self.fault.kind.value, "probability": self.fault.probability},
            "service_delay": self.service_delay
            if isinstance(self.service_delay, (int, float))
            else {"exponential": self.service_delay[1]},
            "rng_seed": self.rng_seed,
            "feed_format": self.feed_format,
        }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SimScenario":
        items = doc.get("items_per_poll", 3)
        if isinstance(items, dict):
            items = ("poisson", float(items["poisson"]))
        delay = doc.get("service_delay", 0.0)
        if isinstance(delay, dict):
            delay = ("exponential", float(delay["exponential"]))
        fault = doc.get("fault")
        if fault:
            fault = FaultSpec(FaultKind(fault["kind"]), float(fault["probability"]))
        return cls(
            feed_count=int(doc["feed_count"]),
            items_per_poll=items,
            validator_mode=ValidatorMode(doc.get("validator_mode", "honor_etag")),
            redirect_hops=int(doc.get("redirect_hops", 0)),
            duplicate_fraction=float(doc.get("duplicate_fraction", 0.0)),
            fault=fault,
            service_delay=delay,
            rng_seed=int(doc.get("rng_seed", 0)),
            feed_format=doc.get("feed_format", "rss2"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SimScenario":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(json.load(f))


@dataclass
class RequestRecord:
    path: str
    if_none_match: str | None
    if_modified_since: str | None
    status: int
    body_bytes: int
    fault: str | None = None


def _sub_rng(seed: int, feed_index: int, stream: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}|{feed_index}|{stream}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _poisson(rng: random.Random, lam: float) -> int:
    # Knuth's method; lambdas here are small.
    threshold = math.exp(-lam)
    k, p = 0, 1.0
    while True:
        p *= rng.random()
        if p <= threshold:
            return k
        k += 1


@dataclass
class _Item:
    guid: str
    title: str
    link: str
    published: datetime


class FeedGenerator:
    """Deterministic item source for one feed. The server drives it per
    content request; expected_items replays it independently of HTTP."""

    def __init__(self, scenario: SimScenario, feed_index: int):
        self.scenario = scenario
        self.feed_index = feed_index
        self._rng = _sub_rng(scenario.rng_seed, feed_index, "items")
        self.polls = 0
        self.emitted = 0
        self.duplicated = 0
        self.distinct: list[_Item] = []

    def _draw_count(self) -> int:
        ipp = self.scenario.items_per_poll
        if isinstance(ipp, int):
            return ipp
        kind, lam = ipp
        if kind != "poisson":
            raise ValueError(f"unknown items_per_poll distribution {kind!r}")
        return _poisson(self._rng, lam)

    def next_batch(self) -> list[_Item]:
        """Items for the next poll. The first poll is always fresh; after
        that, exactly floor(emitted * duplicate_fraction) of all emitted
        items (cumulatively) repeat a prior guid."""
        self.polls += 1
        frac = self.scenario.duplicate_fraction
        batch: list[_Item] = []
        for _ in range(self._draw_count()):
            want_dup = (
                self.polls > 1
                and self.distinct
                and self.duplicated < math.floor((self.emitted + 1) * frac)
            )
            if want_dup:
                item = self.distinct[self.duplicated % len(self.distinct)]
                self.duplicated += 1
            else:
                n = len(self.distinct) + 1
                item = _Item(
                    guid=f"urn:feedsim:{self.feed_index}:{n}",
                    title=f"feed {self.feed_index} item {n}",
                    link=f"{ITEM_LINK_BASE}/feeds/{self.feed_index}/items/{n}",
                    published=ITEM_EPOCH + timedelta(minutes=n),
                )
                self.distinct.append(item)
            self.emitted += 1
            batch.append(item)
        return batch


def render_rss2(title: str, items: list[_Item]) -> bytes:
    parts = [
        '<?xml version="1.0" encoding="utf-8"?>',
        '<rss version="2.0"><channel>',
        f"<title>{escape(title)}</title>",
        f"<link>{ITEM_LINK_BASE}</link>",
        f"<description>{escape(title)}</description>",
    ]
    for it in items:
        parts.append(
            "<item>"
            f"<title>{escape(it.title)}</title>"
            f"<link>{escape(it.link)}</link>"
            f"<guid>{escape(it.guid)}</guid>"
            f"<pubDate>{format_datetime(it.published)}</pubDate>"
            "</item>"
        )
    parts.append("</channel></rss>")
    return "\n".join(parts).encode("utf-8")


def render_atom(title: str, items: list[_Item]) -> bytes:
    parts = [
        '<?xml version="1.0" encoding="utf-8"?>',
        '<feed xmlns="http://www.w3.org/2005/Atom">',
        f"<title>{escape(title)}</title>",
        f"<id>{ITEM_LINK_BASE}</id>",
    ]
    for it in items:
        updated = it.published.isoformat().replace("+00:00", "Z")
        parts.append(
            "<entry>"
            f"<title>{escape(it.title)}</title>"
            f'<link href="{escape(it.link)}"/>'
            f"<id>{escape(it.guid)}</id>"
            f"<updated>{updated}</updated>"
            "</entry>"
        )
    parts.append("</feed>")
    return "\n".join(parts).encode("utf-8")


def expected_items(scenario: SimScenario, polls: int) -> int:
    """Ground truth for dedup acceptance: distinct items the pipeline should
    hold after polling every feed `polls` times (fault-free)."""
    total = 0
    for i in range(scenario.feed_count):
        gen = FeedGenerator(scenario, i)
        for _ in range(polls):
            gen.next_batch()
        total += len(gen.distinct)
    return total


class _FeedState:
    def __init__(self, scenario: SimScenario, feed_index: int):
        self.generator = FeedGenerator(scenario, feed_index)
        self.rng_fault = _sub_rng(scenario.rng_seed, feed_index, "fault")
        self.rng_delay = _sub_rng(scenario.rng_seed, feed_index, "delay")
        self.body: bytes = b""
        self.etag: str | None = None
        self.last_modified: str | None = None
        self.version = 0
        self.lock = threading.Lock()

    def advance(self, scenario: SimScenario) -> None:
        batch = self.generator.next_batch()
        if not batch:
            return
        render = render_atom if scenario.feed_format == "atom" else render_rss2
        candidate = render(f"feedsim feed {self.generator.feed_index}", batch)
        if candidate != self.body:
            self.version += 1
            self.body = candidate
            self.etag = '"' + hashlib.sha256(candidate).hexdigest()[:16] + '"'
            stamp = ITEM_EPOCH + timedelta(seconds=60 * self.version)
            self.last_modified = format_datetime(stamp, usegmt=True)


class SimServer:
    """Serves GET /feeds/<i> (optionally via a 301 hop chain) according to
    a scenario; every request lands in request_log for oracle assertions."""

    def __init__(
        self,
        scenario: SimScenario,
        host: str = "127.0.0.1",
        port: int = 0,
        fault_hold_s: float = 30.0,
    ):
        self.scenario = scenario
        self.host = host
        self.port = port
        self.fault_hold_s = fault_hold_s
        self.request_log: list[RequestRecord] = []
        self._log_lock = threading.Lock()
        self._feeds = [_FeedState(scenario, i) for i in range(scenario.feed_count)]
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> str:
        sim = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_GET(self):  # noqa: N802 (stdlib naming)
                sim._handle(self)

            def log_message(self, fmt, *args):
                logger.debug("feedsim: " + fmt, *args)

            # Pin the auto headers so full responses are byte-stable.
            def version_string(self):
                return "feedsim"

            def date_time_string(self, timestamp=None):
                return "Thu, 01 Jan 2000 00:00:00 GMT"

        try:
            self._httpd = ThreadingHTTPServer((self.host, self.port), Handler)
        except OSError as exc:
            raise StartupError(f"cannot bind {self.host}:{self.port}: {exc}") from exc
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self.base_url

    @property
    def base_url(self) -> str:
        assert self._httpd is not None
        return f"http://{self.host}:{self._httpd.server_address[1]}"

    def stop(self) -> list[RequestRecord]:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        return list(self.request_log)

    def write_log_jsonl(self, path: str | Path) -> None:
        with self._log_lock:
            records = list(self.request_log)
        with open(path, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec.__dict__) + "\n")

    def feed_url(self, feed_index: int) -> str:
        return f"{self.base_url}/feeds/{feed_index}"

    # -- request handling -----------------------------------------------------

    def _record(self, handler, status: int, body_bytes: int, fault: str | None = None) -> None:
        rec = RequestRecord(
            path=handler.path,
            if_none_match=handler.headers.get("If-None-Match"),
            if_modified_since=handler.headers.get("If-Modified-Since"),
            status=status,
            body_bytes=body_bytes,
            fault=fault,
        )
        with self._log_lock:
            self.request_log.append(rec)

    def _send(self, handler, status: int, body: bytes = b"", headers: dict | None = None) -> None:
        handler.send_response(status)
        for k, v in (headers or {}).items():
            handler.send_header(k, v)
        handler.send_header("Content-Length", str(len(body)))
        handler.end_headers()
        if body:
            handler.wfile.write(body)

    def _handle(self, handler) -> None:
        try:
            self._route(handler)
        except (BrokenPipeError, ConnectionResetError):
            # Client gave up (timeout fault path). Swap in a sink so the
            # framework's finish() flush does not raise again.
            handler.wfile = open(os.devnull, "wb")
            handler.close_connection = True

    def _route(self, handler) -> None:
        parts = urlsplit(handler.path)
        segments = [s for s in parts.path.split("/") if s]
        if len(segments) >= 2 and segments[0] == "feeds" and segments[1].isdigit():
            feed_index = int(segments[1])
            if feed_index >= self.scenario.feed_count:
                self._record(handler, 404, 0)
                self._send(handler, 404)
                return
            hop = 0
            if len(segments) == 4 and segments[2] == "hop" and segments[3].isdigit():
                hop = int(segments[3])
            elif len(segments) != 2:
                self._record(handler, 404, 0)
                self._send(handler, 404)
                return
            self._serve_feed(handler, feed_index, hop, parts.query)
            return
        self._record(handler, 404, 0)
        self._send(handler, 404)

    def _serve_feed(self, handler, feed_index: int, hop: int, query: str) -> None:
        hops_needed = self.scenario.redirect_hops
        if hop < hops_needed:
            target = f"/feeds/{feed_index}/hop/{hop + 1}"
            if query:
                target += f"?{query}"
            self._record(handler, 301, 0)
            self._send(handler, 301, headers={"Location": target})
            return
        self._serve_content(handler, self._feeds[feed_index])

    def _serve_content(self, handler, state: _FeedState) -> None:
        scenario = self.scenario
        with state.lock:
            delay = self._draw_delay(state)
            fault = self._draw_fault(state)
            if fault is None:
                state.advance(scenario)
                body = state.body
                etag = state.etag
                last_modified = state.last_modified
        if delay > 0:
            time.sleep(delay)

        if fault is FaultKind.TIMEOUT:
            self._record(handler, 0, 0, fault=fault.value)
            time.sleep(self.fault_hold_s)
            self._send(handler, 200, b"late")
            return
        if fault is FaultKind.HTTP_500:
            self._record(handler, 500, 0, fault=fault.value)
            self._send(handler, 500, b"injected error")
            return
        if fault is FaultKind.MID_BODY_CUT:
            with state.lock:
                if not state.body:
                    state.advance(scenario)
                body = state.body or b"placeholder body for cut"
            # Promise the full length, deliver half, then close: the client
            # sees the connection die mid-body.
            half = body[: max(1, len(body) // 2)]
            self._record(handler, 200, len(half), fault=fault.value)
            handler.send_response(200)
            handler.send_header("Content-Type", "application/xml")
            handler.send_header("Content-Length", str(len(body)))
            handler.end_headers()
            handler.wfile.write(half)
            handler.close_connection = True
            return

        not_modified = False
        if scenario.validator_mode is ValidatorMode.HONOR_ETAG:
            client_etag = handler.headers.get("If-None-Match")
            not_modified = client_etag is not None and client_etag == etag
        elif scenario.validator_mode is ValidatorMode.HONOR_LAST_MODIFIED:
            client_lm = handler.headers.get("If-Modified-Since")
            not_modified = client_lm is not None and client_lm == last_modified

        if not_modified:
            self._record(handler, 304, 0)
            headers = {}
            if etag:
                headers["ETag"] = etag
            if last_modified:
                headers["Last-Modified"] = last_modified
            self._send(handler, 304, headers=headers)
            return

        headers = {"Content-Type": "application/xml"}
        if etag:
            headers["ETag"] = etag
        if last_modified:
            headers["Last-Modified"] = last_modified
        self._record(handler, 200, len(body))
        self._send(handler, 200, body, headers=headers)

    def _draw_delay(self, state: _FeedState) -> float:
        delay = self.scenario.service_delay
        if isinstance(delay, (int, float)):
            return float(delay)
        kind, mean = delay
        if kind != "exponential":
            raise ValueError(f"unknown service_delay distribution {kind!r}")
        return state.rng_delay.expovariate(1.0 / mean) if mean > 0 else 0.0

    def _draw_fault(self, state: _FeedState) -> FaultKind | None:
        spec = self.scenario.fault
        if spec is None:
            return None
        if state.rng_fault.random() < spec.probability:
            return spec.kind
        return None


__all__ = [
    "FaultKind",
    "FaultSpec",
    "FeedGenerator",
    "RequestRecord",
    "SimScenario",
    "SimServer",
    "StartupError",
    "ValidatorMode",
    "expected_items",
    "render_atom",
    "render_rss2",
]
