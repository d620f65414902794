"""Long-running service wiring: store + queue + scheduler ticks + router +
channel pools + monitor, fronted by a small JSON-over-HTTP admin API for
stream CRUD and prioritization. Interrupts drain in-flight work (bounded
by twice the fetch timeout) before exit."""

from __future__ import annotations

import json
import logging
import re
import signal
import threading
import time
from datetime import datetime
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from .config import AppConfig
from .dispatch import FeedRouter, PoolStats, ReplenishPolicy, WorkerPool
from .model import (
    ChannelKind,
    ValidationError,
    stream_to_json,
    utcnow,
    validate_stream,
)
from .monitor import (
    DeadLetterReason,
    DeadLetterRecord,
    Monitor,
    bucket_to_json,
)
from .queues import DualQueue, QueueFull
from .scheduler import Scheduler, SchedulerConfig
from .store import StreamStore, UnknownStream
from .worker import ChannelFetchers, process_message

logger = logging.getLogger(__name__)


class StartupError(Exception):
    """Admin listener could not bind (port busy)."""


_STREAM_PATH = re.compile(r"^/streams/([A-Za-z0-9_.-]+)$")
_PRIORITIZE_PATH = re.compile(r"^/streams/([A-Za-z0-9_.-]+)/prioritize$")


class Service:
    def __init__(self, config: AppConfig | None = None, clock: Callable[[], datetime] = utcnow):
        self.config = config or AppConfig()
        self.clock = clock
        cfg = self.config

        self.store = StreamStore(cfg.store_root, clock=clock)
        self.queue = DualQueue(
            capacity=cfg.queue_capacity,
            visibility_timeout=cfg.queue_visibility_timeout_s,
        )
        self.monitor = Monitor(
            queue=self.queue,
            store=self.store,
            window=cfg.monitor_bucket_window_s,
            dead_letter_threshold=cfg.monitor_dead_letter_threshold,
            ring_size=cfg.monitor_ring_size,
            alert_webhook_url=cfg.monitor_alert_webhook_url,
            clock=clock,
        )
        self.scheduler = Scheduler(
            self.store,
            self.queue,
            SchedulerConfig(
                tick_interval=cfg.scheduler_tick_interval_s,
                pick_horizon=cfg.scheduler_pick_horizon_s,
                pick_limit=cfg.scheduler_pick_limit,
                stale_after=cfg.scheduler_stale_after_s,
            ),
            clock=clock,
            queue_full_sink=lambda msg: self.monitor.record_dead_letter(
                DeadLetterRecord(msg, DeadLetterReason.QUEUE_FULL, self.clock())
            ),
        )
        self.fetchers = ChannelFetchers(timeout=cfg.worker_fetch_timeout_s)

        def handler(msg):
            return process_message(msg, self.store, self.fetchers, self.clock)

        def overflow_sink(msg):
            self.monitor.record_dead_letter(
                DeadLetterRecord(msg, DeadLetterReason.MAILBOX_OVERFLOW, self.clock())
            )

        self.pools: dict[ChannelKind, WorkerPool] = {}
        for offset, channel in enumerate(ChannelKind):
            self.pools[channel] = WorkerPool(
                channel,
                handler=handler,
                completer=lambda msg: self.router.on_complete(msg),
                capacity=cfg.dispatch_mailbox_capacity,
                stats=PoolStats(
                    current_size=cfg.dispatch_pool_min,
                    bounds=(cfg.dispatch_pool_min, cfg.dispatch_pool_max),
                    explore_probability=cfg.dispatch_explore_probability,
                    rng_seed=cfg.dispatch_rng_seed + offset,
                ),
                dead_letter=overflow_sink,
            )

        self.router = FeedRouter(
            self.queue,
            self.pools,
            ReplenishPolicy(
                target_buffer=cfg.dispatch_target_buffer,
                processed_trigger=cfg.dispatch_processed_trigger,
                timeout_trigger=cfg.dispatch_timeout_trigger_s,
                batch_max=cfg.dispatch_batch_max,
            ),
            unroutable_sink=lambda msg: self.monitor.record_dead_letter(
                DeadLetterRecord(msg, DeadLetterReason.UNROUTABLE, self.clock())
            ),
            clock=clock,
        )

        self._stop = threading.Event()
        self._ticker: threading.Thread | None = None
        self._httpd: ThreadingHTTPServer | None = None
        self._http_thread: threading.Thread | None = None

    # -- lifecycle --------------------------------------------------------------

    def start(self) -> None:
        cfg = self.config
        try:
            self._httpd = ThreadingHTTPServer((cfg.admin_host, cfg.admin_port), self._make_handler())
        except OSError as exc:
            raise StartupError(f"cannot bind admin listener {cfg.admin_listen}: {exc}") from exc
        self._httpd.daemon_threads = True
        self._http_thread = threading.Thread(target=self._httpd.serve_forever, name="admin-http", daemon=True)
        self._http_thread.start()

        for pool in self.pools.values():
            pool.start()
        self.router.start()
        self._stop.clear()
        self._ticker = threading.Thread(target=self._ticker_loop, name="ticker", daemon=True)
        self._ticker.start()
        logger.info("service up: admin on %s, store at %s", self.admin_url, cfg.store_root)

    @property
    def admin_url(self) -> str:
        assert self._httpd is not None
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _ticker_loop(self) -> None:
        cfg = self.config
        next_tick = time.monotonic()
        next_resize = time.monotonic() + cfg.dispatch_resize_epoch_s
        while not self._stop.is_set():
            now_mono = time.monotonic()
            if now_mono >= next_tick:
                try:
                    self.scheduler.tick()
                    self.monitor.roll()
                except Exception:
                    logger.exception("tick failed; continuing")
                next_tick += cfg.scheduler_tick_interval_s
                if next_tick <= now_mono:
                    # Overran at least one period: skip, don't stack.
                    next_tick = now_mono + cfg.scheduler_tick_interval_s
            if now_mono >= next_resize:
                for pool in self.pools.values():
                    try:
                        pool.resize_tick(cfg.dispatch_resize_epoch_s)
                    except Exception:
                        logger.exception("pool resize failed; continuing")
                next_resize += cfg.dispatch_resize_epoch_s
                if next_resize <= now_mono:
                    next_resize = now_mono + cfg.dispatch_resize_epoch_s
            self._stop.wait(0.05)

    def drain(self, timeout: float | None = None) -> bool:
        """Wait for in-flight work to settle; returns True when the buffer
        emptied inside the bound."""
        if timeout is None:
            timeout = 2 * self.config.worker_fetch_timeout_s
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.router.state.outstanding == 0:
                return True
            time.sleep(0.05)
        return self.router.state.outstanding == 0

    def stop(self) -> None:
        self._stop.set()
        if self._ticker is not None:
            self._ticker.join(5.0)
            self._ticker = None
        self.router.stop()
        drained = self.drain()
        if not drained:
            logger.warning(
                "drain bound hit with %d messages outstanding", self.router.state.outstanding
            )
        for pool in self.pools.values():
            pool.stop()
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        self.monitor.roll()
        self.store.close()
        logger.info("service stopped (drained=%s)", drained)

    def run_forever(self) -> int:
        shutdown = threading.Event()

        def _on_signal(signum, frame):
            logger.info("signal %s: shutting down", signum)
            shutdown.set()

        signal.signal(signal.SIGINT, _on_signal)
        signal.signal(signal.SIGTERM, _on_signal)
        self.start()
        shutdown.wait()
        self.stop()
        return 0

    # -- admin API ----------------------------------------------------------------

    def metrics_payload(self) -> dict:
        depths = self.queue.depths()
        counters = self.queue.counters()
        self.monitor.roll()
        return {
            "buckets": [bucket_to_json(b) for b in self.monitor.snapshot()],
            "queue": {
                "visible_main": depths.visible_main,
                "visible_priority": depths.visible_priority,
                "in_flight": depths.in_flight,
                "sent": counters.sent,
                "received": counters.received,
                "deleted": counters.deleted,
            },
            "dead_letter_total": self.monitor.dead_letter_total,
            "alerts": len(self.monitor.alerts),
            "items_total": self.store.count_items(),
            "streams_total": self.store.count_streams(),
        }

    def create_stream(self, payload: dict) -> tuple[int, dict]:
        try:
            stream = validate_stream(payload, now=self.clock())
        except ValidationError as exc:
            return 400, {"error": exc.kind, "field": exc.field, "detail": str(exc)}
        if "id" in payload and payload["id"] and self.store.has_stream(stream.id):
            return 409, {"error": "duplicate_id", "field": "id"}
        self.store.upsert_stream(stream)
        return 201, stream_to_json(stream)

    def _make_handler(self):
        service = self

        class AdminHandler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                logger.debug("admin: " + fmt, *args)

            def _reply(self, status: int, payload: dict | None = None):
                body = json.dumps(payload).encode() if payload is not None else b""
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                if body:
                    self.wfile.write(body)

            def _read_json(self) -> dict | None:
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                if not raw:
                    return None
                try:
                    doc = json.loads(raw)
                except json.JSONDecodeError:
                    return None
                return doc if isinstance(doc, dict) else None

            def do_GET(self):  # noqa: N802
                if self.path == "/healthz":
                    self._reply(200, {"status": "ok"})
                    return
                if self.path == "/metrics":
                    self._reply(200, service.metrics_payload())
                    return
                m = _STREAM_PATH.match(self.path)
                if m:
                    try:
                        stream = service.store.get_stream(m.group(1))
                    except UnknownStream:
                        self._reply(404, {"error": "unknown_stream"})
                        return
                    self._reply(200, stream_to_json(stream))
                    return
                self._reply(404, {"error": "not_found"})

            def do_POST(self):  # noqa: N802
                if self.path == "/streams":
                    payload = self._read_json()
                    if payload is None:
                        self._reply(400, {"error": "bad_json"})
                        return
                    status, doc = service.create_stream(payload)
                    self._reply(status, doc)
                    return
                m = _PRIORITIZE_PATH.match(self.path)
                if m:
                    try:
                        enqueued = service.scheduler.prioritize(m.group(1))
                    except UnknownStream:
                        self._reply(404, {"error": "unknown_stream"})
                        return
                    except QueueFull:
                        self._reply(503, {"error": "queue_full"})
                        return
                    self._reply(202, {"prioritized": m.group(1), "enqueued": enqueued})
                    return
                self._reply(404, {"error": "not_found"})

            def do_DELETE(self):  # noqa: N802
                m = _STREAM_PATH.match(self.path)
                if m:
                    try:
                        service.store.delete_stream(m.group(1))
                    except UnknownStream:
                        self._reply(404, {"error": "unknown_stream"})
                        return
                    self._reply(204)
                    return
                self._reply(404, {"error": "not_found"})

        return AdminHandler


__all__ = ["Service", "StartupError"]
