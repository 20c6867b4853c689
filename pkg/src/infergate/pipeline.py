"""Frame admission for a single serialized inference engine.

A frame arriving while the engine is idle goes straight to inference. While
the engine is busy frames wait in a FIFO; once the FIFO reaches
``max(5, ceil(r))`` entries everything in it is discarded and only the newest
frame is kept, so the engine never works through a stale backlog.
"""

from __future__ import annotations

import enum
import math
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Hashable

import numpy as np

MIN_QUEUE_THRESHOLD = 5
RATE_WINDOW = 30


class OrderingError(ValueError):
    pass


class FrameRateEstimator:
    """Arrivals-per-second over the last ``window`` arrival timestamps (seconds)."""

    def __init__(self, window: int = RATE_WINDOW):
        if window < 2:
            raise ValueError("window must hold at least two arrivals")
        self._times: deque[float] = deque(maxlen=window)

    def observe_arrival(self, t: float) -> float:
        if self._times and t < self._times[-1]:
            raise OrderingError(f"arrival {t} precedes {self._times[-1]}")
        self._times.append(t)
        return self.rate

    @property
    def count(self) -> int:
        return len(self._times)

    @property
    def rate(self) -> float:
        if len(self._times) < 2:
            return 0.0
        span = self._times[-1] - self._times[0]
        if span <= 0:
            # all arrivals share one timestamp; no usable rate
            return 0.0
        return (len(self._times) - 1) / span


def drop_threshold(r: float) -> int:
    if not math.isfinite(r):
        raise ValueError(f"frame rate must be finite, got {r}")
    return max(MIN_QUEUE_THRESHOLD, math.ceil(r))


class Decision(enum.Enum):
    INFER_NOW = "infer_now"
    ENQUEUED = "enqueued"
    ENQUEUED_AFTER_DROP = "enqueued_after_drop"


@dataclass
class QueuedFrame:
    key: Hashable
    item: Any
    enqueued_at: float
    epoch: int  # number of drop events before this frame was enqueued


@dataclass
class DropEvent:
    trigger: Hashable
    purged: list[Hashable]
    at: float


class LatencySamples:
    """Append-only latency samples in microseconds."""

    def __init__(self):
        self._lock = threading.Lock()
        self._samples: list[int] = []

    def add(self, us: int) -> None:
        if us < 0:
            raise ValueError(f"negative latency {us}")
        with self._lock:
            self._samples.append(int(us))

    def values(self) -> np.ndarray:
        with self._lock:
            return np.asarray(self._samples, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._samples)

    def mean(self) -> float | None:
        v = self.values()
        return float(v.mean()) if v.size else None

    def max(self) -> int | None:
        v = self.values()
        return int(v.max()) if v.size else None

    def percentile(self, p: float) -> int | None:
        """Nearest-rank percentile."""
        v = np.sort(self.values())
        if not v.size:
            return None
        rank = max(1, math.ceil(p / 100 * v.size))
        return int(v[rank - 1])


@dataclass
class PipelineStats:
    frames_in: int = 0
    frames_inferred: int = 0  # handed to the engine, including one in progress
    frames_dropped: int = 0
    dropped_by_source: Counter = field(default_factory=Counter)
    latency: LatencySamples = field(default_factory=LatencySamples)

    def record_latency(self, frame_seq: int, t_arrival_us: int, t_result_us: int) -> None:
        if t_result_us < t_arrival_us:
            raise ValueError(f"frame {frame_seq}: result precedes arrival")
        self.latency.add(t_result_us - t_arrival_us)

    def line(self) -> str:
        """``frames_in inferred dropped mean_latency_us p99_latency_us``"""
        mean = self.latency.mean()
        p99 = self.latency.percentile(99)
        return (
            f"{self.frames_in} {self.frames_inferred} {self.frames_dropped} "
            f"{'-' if mean is None else round(mean)} {'-' if p99 is None else p99}"
        )


def _source_of(key: Hashable) -> Hashable:
    return key[0] if isinstance(key, tuple) and key else key


class ProcessQueue:
    """FIFO of frames awaiting the engine, with the wholesale drop rule.

    ``key`` identifies a frame, conventionally ``(robot_id, seq)``; the first
    element is used to attribute drops to a source. Every method is atomic
    with respect to the others.
    """

    def __init__(self, stats: PipelineStats | None = None, clock=None):
        self._entries: deque[QueuedFrame] = deque()
        self._lock = threading.Lock()
        self.stats = stats if stats is not None else PipelineStats()
        self.drop_events: list[DropEvent] = []
        self._clock = clock or (lambda: 0.0)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def epoch(self) -> int:
        return len(self.drop_events)

    def submit(self, key: Hashable, item: Any, engine_busy: bool, r: float) -> Decision:
        with self._lock:
            self.stats.frames_in += 1
            now = self._clock()
            if not engine_busy:
                self.stats.frames_inferred += 1
                # FramePipeline never idles with a backlog; a caller that does
                # still gets the bound enforced
                if len(self._entries) >= drop_threshold(r):
                    purged = [e.key for e in self._entries]
                    self._discard(purged)
                    self._entries.clear()
                    self.drop_events.append(DropEvent(key, purged, now))
                return Decision.INFER_NOW
            entry = QueuedFrame(key, item, now, self.epoch)
            self._entries.append(entry)
            if len(self._entries) < drop_threshold(r):
                return Decision.ENQUEUED
            purged = [e.key for e in self._entries if e is not entry]
            self._discard(purged)
            self._entries.clear()
            entry.epoch = self.epoch + 1
            self.drop_events.append(DropEvent(key, purged, now))
            self._entries.append(entry)
            return Decision.ENQUEUED_AFTER_DROP

    def _discard(self, keys) -> None:
        self.stats.frames_dropped += len(keys)
        for k in keys:
            self.stats.dropped_by_source[_source_of(k)] += 1

    def next_frame(self) -> QueuedFrame | None:
        with self._lock:
            if not self._entries:
                return None
            self.stats.frames_inferred += 1
            return self._entries.popleft()

    def purge_source(self, source: Hashable) -> list[Hashable]:
        """Drop every queued frame whose key belongs to ``source``."""
        with self._lock:
            gone = [e.key for e in self._entries if _source_of(e.key) == source]
            if gone:
                self._entries = deque(
                    e for e in self._entries if _source_of(e.key) != source
                )
                self._discard(gone)
            return gone

    def keys(self) -> list[Hashable]:
        with self._lock:
            return [e.key for e in self._entries]


class FramePipeline:
    """ProcessQueue plus the engine-busy flag, for one inference worker.

    Receivers call :meth:`submit`; the worker loops on :meth:`acquire`, runs
    inference, then calls :meth:`release`, which hands over the next queued
    frame (if any) without ever clearing the busy flag in between.
    """

    def __init__(self, stats: PipelineStats | None = None, clock=None):
        self.queue = ProcessQueue(stats, clock)
        self._cond = threading.Condition()
        self._busy = False
        self._ready: QueuedFrame | None = None
        self._closed = False

    @property
    def stats(self) -> PipelineStats:
        return self.queue.stats

    @property
    def busy(self) -> bool:
        return self._busy

    def submit(self, key: Hashable, item: Any, r: float) -> Decision:
        with self._cond:
            decision = self.queue.submit(key, item, self._busy, r)
            if decision is Decision.INFER_NOW:
                self._busy = True
                self._ready = QueuedFrame(key, item, self.queue._clock(), self.queue.epoch)
                self._cond.notify_all()
            return decision

    def acquire(self, timeout: float | None = None) -> QueuedFrame | None:
        with self._cond:
            if not self._cond.wait_for(lambda: self._ready is not None or self._closed, timeout):
                return None
            entry, self._ready = self._ready, None
            return entry

    def release(self) -> None:
        with self._cond:
            nxt = self.queue.next_frame()
            if nxt is None:
                self._busy = False
            else:
                self._ready = nxt
                self._cond.notify_all()

    def purge_source(self, source: Hashable) -> list[Hashable]:
        with self._cond:
            return self.queue.purge_source(source)

    def queued(self) -> int:
        return len(self.queue) + (self._ready is not None)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
