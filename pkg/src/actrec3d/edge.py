"""Edge inference runner: watch a drop directory, classify clips, emit events.

Clips are RVID files or directories of PGM frames.  A candidate is processed
once its size signature is unchanged across two consecutive polls, so
half-written files are never read.  Processed inputs move to ``done/``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import shutil
import sys
import threading
import time
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .data import load_clip
from .model_io import Archive, load_archive
from .train_eval import predict

logger = logging.getLogger(__name__)

DONE_DIR = "done"
_EVENT_NS = uuid.UUID("6f1c1f4e-5b1a-4c57-9a57-3d2b8a1e0c11")


@dataclass
class ClassificationEvent:
    id: str
    clip: str
    class_name: str | None
    class_index: int | None
    probs: list[float] | None
    ts: str
    model_fingerprint: str
    error: str | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "clip": self.clip, "class": self.class_name,
             "class_index": self.class_index, "probs": self.probs, "ts": self.ts,
             "model_fingerprint": self.model_fingerprint}
        if self.error is not None:
            d["error"] = self.error
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationEvent":
        return cls(d["id"], d["clip"], d["class"], d["class_index"], d["probs"], d["ts"],
                   d["model_fingerprint"], d.get("error"))

    @classmethod
    def from_json(cls, s: str) -> "ClassificationEvent":
        return cls.from_dict(json.loads(s))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


def _content_digest(path: Path) -> str:
    h = hashlib.sha256()
    files = sorted(path.iterdir()) if path.is_dir() else [path]
    for f in files:
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def classify_path(path: Path, archive: Archive) -> ClassificationEvent:
    """Classify one clip; any failure becomes an error event."""
    path = Path(path)
    try:
        digest = _content_digest(path)
    except OSError as exc:
        digest = f"unreadable:{exc}"
    event_id = str(uuid.uuid5(_EVENT_NS, f"{archive.fingerprint}:{path.name}:{digest}"))
    try:
        clip = load_clip(path)
        k, name, probs = predict(archive.spec, archive.params, clip, archive.preprocess,
                                 archive.classes)
    except Exception as exc:  # malformed input must never stop the runner
        logger.warning("clip %s rejected: %s", path.name, exc)
        return ClassificationEvent(event_id, path.name, None, None, None, _now(),
                                   archive.fingerprint, f"{type(exc).__name__}: {exc}")
    return ClassificationEvent(event_id, path.name, name, k, [float(p) for p in probs],
                               _now(), archive.fingerprint)


# -- sinks -------------------------------------------------------------------

@dataclass
class DeliveryResult:
    delivered: bool
    attempts: int
    error: str | None = None


class StdoutSink:
    def __init__(self, stream=None):
        self.stream = stream

    def send(self, payload: str) -> None:
        stream = self.stream or sys.stdout
        stream.write(payload + "\n")
        stream.flush()


class WebhookSink:
    """POST JSON to ``url``; any non-2xx answer or network error raises."""

    def __init__(self, url: str, timeout: float = 5.0):
        self.url = url
        self.timeout = timeout

    def send(self, payload: str) -> None:
        req = urllib.request.Request(self.url, data=payload.encode("utf-8"), method="POST",
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            if not 200 <= resp.status < 300:
                raise urllib.error.HTTPError(self.url, resp.status, "non-2xx", resp.headers, None)


@dataclass
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 0.5
    max_delay: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.max_delay, self.base_delay * 2 ** (attempt - 1))


def dispatch_event(event: ClassificationEvent, sink, retry: RetryPolicy | None = None,
                   sleep=time.sleep) -> DeliveryResult:
    retry = retry or RetryPolicy()
    payload = event.to_json()
    err = None
    for attempt in range(1, retry.max_attempts + 1):
        try:
            sink.send(payload)
            return DeliveryResult(True, attempt)
        except (OSError, urllib.error.URLError) as exc:
            err = str(exc)
            logger.info("delivery of %s failed (attempt %d): %s", event.id, attempt, err)
            if attempt < retry.max_attempts:
                sleep(retry.delay(attempt))
    logger.error("event %s undelivered after %d attempts: %s", event.id, retry.max_attempts, err)
    return DeliveryResult(False, retry.max_attempts, err)


# -- runner ------------------------------------------------------------------

def _signature(path: Path):
    st = path.stat()
    if path.is_dir():
        files = sorted(f for f in path.iterdir() if f.is_file())
        return ("dir", len(files), sum(f.stat().st_size for f in files),
                max((f.stat().st_mtime_ns for f in files), default=st.st_mtime_ns))
    return ("file", st.st_size, st.st_mtime_ns)


def _is_candidate(path: Path) -> bool:
    if path.name.startswith(".") or path.name == DONE_DIR:
        return False
    if path.is_dir():
        return any(f.suffix.lower() == ".pgm" for f in path.iterdir())
    return path.suffix.lower() == ".rvid"


class EdgeRunner:
    """Poll ``input_dir``, classify stable clips in arrival order, dispatch events.

    Classification runs on the calling thread; delivery runs on a background
    thread fed by a bounded queue, so a slow sink throttles ingestion.
    """

    def __init__(self, input_dir, archive_path, sink=None, poll_ms: int = 500,
                 retry: RetryPolicy | None = None, queue_size: int = 8):
        self.input_dir = Path(input_dir)
        if not self.input_dir.is_dir():
            raise NotADirectoryError(f"input directory {self.input_dir} does not exist")
        self.archive = load_archive(archive_path)
        self.sink = sink or StdoutSink()
        self.poll_s = poll_ms / 1000.0
        self.retry = retry or RetryPolicy()
        self.done_dir = self.input_dir / DONE_DIR
        self.done_dir.mkdir(exist_ok=True)
        self.events: list[ClassificationEvent] = []
        self.results: list[DeliveryResult] = []
        self._queue: queue.Queue = queue.Queue(maxsize=queue_size)
        # name -> (poll number when first seen, mtime at first sight, signature)
        self._pending: dict[str, tuple] = {}
        self._polls = 0

    def _deliver_loop(self):
        while True:
            event = self._queue.get()
            if event is None:
                return
            self.results.append(dispatch_event(event, self.sink, self.retry))

    def scan(self) -> list[Path]:
        """One poll: return clips whose signature held steady since the last poll."""
        ready = []
        present = set()
        self._polls += 1
        for path in self.input_dir.iterdir():
            try:
                if not _is_candidate(path):
                    continue
                sig = _signature(path)
            except OSError:
                continue  # vanished or unreadable mid-scan; retry next poll
            present.add(path.name)
            prev = self._pending.get(path.name)
            if prev is None:
                # clips first seen in the same poll are ordered by mtime, then name
                self._pending[path.name] = (self._polls, path.stat().st_mtime_ns, sig)
            elif prev[2] == sig:
                ready.append((prev[0], prev[1], path.name, path))
            else:
                self._pending[path.name] = (prev[0], prev[1], sig)
        for name in list(self._pending):
            if name not in present:
                del self._pending[name]
        return [p for *_, p in sorted(ready, key=lambda r: r[:3])]

    def _finish(self, path: Path):
        self._pending.pop(path.name, None)
        target = self.done_dir / path.name
        if target.exists():
            if target.is_dir():
                shutil.rmtree(target)
            else:
                target.unlink()
        shutil.move(str(path), str(target))

    def run(self, max_events: int | None = None, stop: threading.Event | None = None,
            timeout: float | None = None) -> list[ClassificationEvent]:
        """Process clips until ``max_events`` are emitted, ``stop`` is set or
        ``timeout`` seconds pass.  Waits for outstanding deliveries on exit."""
        worker = threading.Thread(target=self._deliver_loop, name="edge-dispatch", daemon=True)
        worker.start()
        start = time.monotonic()
        emitted = 0
        try:
            while True:
                for path in self.scan():
                    event = classify_path(path, self.archive)
                    self._finish(path)
                    self.events.append(event)
                    self._queue.put(event)
                    emitted += 1
                    if max_events is not None and emitted >= max_events:
                        return self.events
                if stop is not None and stop.is_set():
                    return self.events
                if timeout is not None and time.monotonic() - start > timeout:
                    return self.events
                time.sleep(self.poll_s)
        finally:
            self._queue.put(None)
            worker.join()


def watch_and_classify(input_dir, archive_path, sink=None, poll_ms: int = 500,
                       max_events: int | None = None, stop: threading.Event | None = None,
                       timeout: float | None = None, retry: RetryPolicy | None = None):
    runner = EdgeRunner(input_dir, archive_path, sink, poll_ms, retry)
    return runner.run(max_events, stop, timeout)
