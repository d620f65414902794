"""Embedded single-node registry of streams and ingested items: one JSON
document per stream, an append-only fingerprint index for dedup, and a
write-ahead journal so pick transitions survive a process kill.

Durability target is process crash, not power loss: documents are replaced
atomically via rename, so a reopened store always sees each record at its
pre-call or post-call value."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable

from .model import (
    FeedItem,
    FeedStream,
    StreamStatus,
    compute_next_due,
    item_fingerprint,
    item_to_json,
    stream_from_json,
    stream_to_json,
    to_rfc3339,
    from_rfc3339,
    utcnow,
)

logger = logging.getLogger(__name__)

# Failing feeds decay: interval * 2^min(failures, 5), capped at 32x.
BACKOFF_CAP_EXPONENT = 5

# Sentinel: "leave this field as stored" (None means clear).
KEEP = object()


class StoreError(Exception):
    """Storage I/O failure; safe to retry."""


class UnknownStream(KeyError):
    pass


class IllegalTransition(Exception):
    """Stream status change outside the legal transition table."""


class StreamStore:
    """Shareable across threads; pick/recover perform an atomic
    check-and-transition under an internal lock."""

    def __init__(self, root: str | Path, clock: Callable[[], datetime] = utcnow):
        self.root = Path(root)
        self.clock = clock
        self._lock = threading.RLock()
        self._streams: dict[str, FeedStream] = {}
        self._fingerprints: set[str] = set()
        self._journal_seq = 0
        self._streams_dir = self.root / "streams"
        self._items_dir = self.root / "items"
        self._journal_path = self.root / "journal.log"
        self._fp_log_path = self.root / "fingerprints.log"
        self._open()

    # -- startup / recovery ------------------------------------------------

    def _open(self) -> None:
        try:
            self._streams_dir.mkdir(parents=True, exist_ok=True)
            self._items_dir.mkdir(parents=True, exist_ok=True)
            for doc_path in sorted(self._streams_dir.glob("*.json")):
                with open(doc_path, "r", encoding="utf-8") as f:
                    self._streams_load(json.load(f), doc_path)
            if self._fp_log_path.exists():
                with open(self._fp_log_path, "r", encoding="utf-8") as f:
                    for line in f:
                        line = line.strip()
                        if line:
                            self._fingerprints.add(line)
            self._replay_journal()
        except (OSError, ValueError, KeyError) as exc:
            raise StoreError(f"cannot open store at {self.root}: {exc}") from exc
        self._fp_log = open(self._fp_log_path, "a", encoding="utf-8")
        self._journal = open(self._journal_path, "a", encoding="utf-8")

    def _streams_load(self, doc: dict, path: Path) -> None:
        try:
            s = stream_from_json(doc)
        except (KeyError, ValueError) as exc:
            raise StoreError(f"corrupt stream document {path}: {exc}") from exc
        self._streams[s.id] = s

    def _replay_journal(self) -> None:
        """Roll forward pick batches that were journaled but not committed,
        then truncate the journal."""
        if not self._journal_path.exists():
            return
        picks: dict[int, dict] = {}
        committed: set[int] = set()
        with open(self._journal_path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    # Torn tail from a crash mid-append; everything after is gone.
                    break
                if entry.get("op") == "pick":
                    picks[entry["seq"]] = entry
                elif entry.get("op") == "commit":
                    committed.add(entry["seq"])
        for seq, entry in sorted(picks.items()):
            if seq in committed:
                continue
            picked_at = from_rfc3339(entry["picked_at"])
            for stream_id in entry["ids"]:
                s = self._streams.get(stream_id)
                if s is None:
                    continue
                recovered = replace(s, status=StreamStatus.IN_PROCESS, picked_at=picked_at)
                self._streams[stream_id] = recovered
                self._write_stream_doc(recovered)
            logger.info("replayed pick batch seq=%s (%d streams)", seq, len(entry["ids"]))
        with open(self._journal_path, "w", encoding="utf-8"):
            pass

    # -- low-level document I/O --------------------------------------------

    def _write_doc(self, path: Path, doc: dict) -> None:
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(doc, f, separators=(",", ":"))
            os.rename(tmp, path)
        except OSError as exc:
            raise StoreError(f"write failed for {path}: {exc}") from exc

    def _write_stream_doc(self, s: FeedStream) -> None:
        self._write_doc(self._streams_dir / f"{s.id}.json", stream_to_json(s))

    def _journal_append(self, entry: dict) -> None:
        try:
            self._journal.write(json.dumps(entry, separators=(",", ":")) + "\n")
            self._journal.flush()
        except OSError as exc:
            raise StoreError(f"journal append failed: {exc}") from exc

    # -- stream CRUD ---------------------------------------------------------

    def upsert_stream(self, s: FeedStream) -> FeedStream:
        with self._lock:
            self._write_stream_doc(s)
            self._streams[s.id] = s
            return s

    # Point reads are lock-free: the mirror dict is only ever mutated by
    # whole-value replacement of immutable records, so a racing read sees
    # either the old or the new value. Readers never block readers.
    def get_stream(self, stream_id: str) -> FeedStream:
        s = self._streams.get(stream_id)
        if s is None:
            raise UnknownStream(stream_id)
        return s

    def delete_stream(self, stream_id: str) -> None:
        """Removes the stream record; its items stay as an audit trail."""
        with self._lock:
            if stream_id not in self._streams:
                raise UnknownStream(stream_id)
            del self._streams[stream_id]
            try:
                os.remove(self._streams_dir / f"{stream_id}.json")
            except FileNotFoundError:
                pass
            except OSError as exc:
                raise StoreError(f"delete failed for {stream_id}: {exc}") from exc

    def has_stream(self, stream_id: str) -> bool:
        return stream_id in self._streams

    def stream_ids(self) -> list[str]:
        with self._lock:
            return list(self._streams)

    def count_streams(self) -> int:
        return len(self._streams)

    # -- scheduling transitions ----------------------------------------------

    def _pick_batch(self, selected: list[FeedStream], picked_at: datetime) -> list[FeedStream]:
        if not selected:
            return []
        self._journal_seq += 1
        seq = self._journal_seq
        self._journal_append(
            {
                "seq": seq,
                "op": "pick",
                "picked_at": to_rfc3339(picked_at),
                "ids": [s.id for s in selected],
            }
        )
        picked = []
        for s in selected:
            p = replace(s, status=StreamStatus.IN_PROCESS, picked_at=picked_at)
            self._write_stream_doc(p)
            self._streams[p.id] = p
            picked.append(p)
        self._journal_append({"seq": seq, "op": "commit"})
        return picked

    def pick_due_streams(self, now: datetime, horizon: float, limit: int) -> list[FeedStream]:
        """Atomically claim up to `limit` streams due within `horizon`
        seconds, ordered by next_due then id."""
        if horizon < 0:
            raise ValueError("horizon must be >= 0")
        if limit < 1:
            raise ValueError("limit must be >= 1")
        cutoff = now + timedelta(seconds=horizon)
        with self._lock:
            due = [
                s
                for s in self._streams.values()
                if s.status is not StreamStatus.IN_PROCESS and s.next_due <= cutoff
            ]
            due.sort(key=lambda s: (s.next_due, s.id))
            return self._pick_batch(due[:limit], now)

    def recover_stale(self, now: datetime, stale_after: float, limit: int) -> list[FeedStream]:
        """Re-pick streams stuck in-process past the staleness threshold."""
        if stale_after <= 0:
            raise ValueError("stale_after must be > 0")
        cutoff = now - timedelta(seconds=stale_after)
        with self._lock:
            stale = [
                s
                for s in self._streams.values()
                if s.status is StreamStatus.IN_PROCESS
                and s.picked_at is not None
                and s.picked_at <= cutoff
            ]
            stale.sort(key=lambda s: (s.picked_at, s.id))
            return self._pick_batch(stale[:limit], now)

    def force_pick(self, stream_id: str, now: datetime) -> FeedStream:
        """Priority bypass: claim a stream immediately, ignoring next_due."""
        with self._lock:
            if stream_id not in self._streams:
                raise UnknownStream(stream_id)
            return self._pick_batch([self._streams[stream_id]], now)[0]

    def revert_pick(self, stream_id: str) -> FeedStream:
        """Roll back a claim whose work could not be enqueued (queue full);
        the stream returns to idle and is re-picked on a later cycle."""
        with self._lock:
            s = self._streams.get(stream_id)
            if s is None:
                raise UnknownStream(stream_id)
            if s.status is not StreamStatus.IN_PROCESS:
                raise IllegalTransition(f"{stream_id} is {s.status.value}, not in_process")
            reverted = replace(s, status=StreamStatus.IDLE, picked_at=None)
            self._write_stream_doc(reverted)
            self._streams[stream_id] = reverted
            return reverted

    def mark_processed(
        self,
        stream_id: str,
        outcome: StreamStatus,
        completed_at: datetime,
        etag=KEEP,
        last_modified=KEEP,
        url=KEEP,
    ) -> FeedStream:
        """Finish one processing cycle: set outcome, schedule the next poll
        (with exponential backoff on failures), and update validators and a
        permanently-redirected URL when provided."""
        if outcome not in (StreamStatus.PROCESSED, StreamStatus.FAILED):
            raise ValueError(f"outcome must be processed or failed, got {outcome}")
        with self._lock:
            s = self._streams.get(stream_id)
            if s is None:
                raise UnknownStream(stream_id)
            if s.status is not StreamStatus.IN_PROCESS:
                raise IllegalTransition(f"{stream_id} is {s.status.value}, not in_process")
            if outcome is StreamStatus.PROCESSED:
                failures = 0
            else:
                failures = s.consecutive_failures + 1
            effective = s.poll_interval * (2 ** min(failures, BACKOFF_CAP_EXPONENT))
            updated = replace(
                s,
                status=outcome,
                picked_at=None,
                next_due=compute_next_due(completed_at, effective),
                consecutive_failures=failures,
                etag=s.etag if etag is KEEP else etag,
                last_modified=s.last_modified if last_modified is KEEP else last_modified,
                url=s.url if url is KEEP else url,
            )
            self._write_stream_doc(updated)
            self._streams[stream_id] = updated
            return updated

    # -- items ----------------------------------------------------------------

    def _item_path(self, fingerprint: str) -> Path:
        return self._items_dir / fingerprint[:2] / f"{fingerprint}.json"

    def insert_items_dedup(self, items: Iterable[FeedItem]) -> int:
        """Insert items whose fingerprint is unseen; returns how many were
        actually stored. Idempotent: re-inserting a batch stores nothing."""
        inserted = 0
        with self._lock:
            for it in items:
                expected = item_fingerprint(it.stream_id, it.guid, it.link)
                if it.fingerprint != expected:
                    raise ValueError(
                        f"fingerprint mismatch for item {it.guid or it.link}: "
                        f"{it.fingerprint} != {expected}"
                    )
                if it.fingerprint in self._fingerprints:
                    continue
                path = self._item_path(it.fingerprint)
                path.parent.mkdir(exist_ok=True)
                self._write_doc(path, item_to_json(it))
                try:
                    self._fp_log.write(it.fingerprint + "\n")
                except OSError as exc:
                    raise StoreError(f"fingerprint log append failed: {exc}") from exc
                self._fingerprints.add(it.fingerprint)
                inserted += 1
            try:
                self._fp_log.flush()
            except OSError as exc:
                raise StoreError(f"fingerprint log flush failed: {exc}") from exc
        return inserted

    def has_item(self, fingerprint: str) -> bool:
        return fingerprint in self._fingerprints

    def count_items(self) -> int:
        return len(self._fingerprints)

    # -- maintenance ------------------------------------------------------------

    def compact(self) -> dict:
        """Rewrite the fingerprint index without duplicate lines and drop
        applied journal entries. Returns counts for reporting."""
        with self._lock:
            fp_lines = len(self._fingerprints)
            tmp = self._fp_log_path.with_name(self._fp_log_path.name + ".tmp")
            try:
                self._fp_log.close()
                with open(tmp, "w", encoding="utf-8") as f:
                    for fp in sorted(self._fingerprints):
                        f.write(fp + "\n")
                os.rename(tmp, self._fp_log_path)
                self._fp_log = open(self._fp_log_path, "a", encoding="utf-8")
                self._journal.close()
                with open(self._journal_path, "w", encoding="utf-8"):
                    pass
                self._journal = open(self._journal_path, "a", encoding="utf-8")
            except OSError as exc:
                raise StoreError(f"compact failed: {exc}") from exc
            return {"fingerprints": fp_lines, "streams": len(self._streams)}

    def close(self) -> None:
        with self._lock:
            for handle in (self._fp_log, self._journal):
                try:
                    handle.close()
                except OSError:
                    pass


__all__ = [
    "IllegalTransition",
    "KEEP",
    "StoreError",
    "StreamStore",
    "UnknownStream",
]
