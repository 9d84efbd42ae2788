"""Per-run signal recorder and on-disk channel store.

The step loop writes samples into preallocated memory; completed blocks
are handed to a writer thread through a bounded deque that never blocks
the producer (full queue drops the block and counts it). On disk each
channel is a raw little-endian float64 file next to one JSON index, so
any tool can read a run back.
"""

from __future__ import annotations

import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INDEX_NAME = "index.json"
BLOCK = 16384
QUEUE_DEPTH = 64


@dataclass(frozen=True)
class ChannelInfo:
    channel_id: str
    label: str
    units: str


class Recorder:
    """Preallocated (n_channels x n_samples) store with streaming flush."""

    def __init__(self, channels: list[ChannelInfo], n_samples: int,
                 dt: float, out_dir: Path | str | None = None,
                 avoid_cpu: int | None = None):
        self.channels = channels
        self.n_samples = n_samples
        self.dt = dt
        # fill() commits the pages now; faulting them in lazily would
        # stall steps mid-run
        self.buf = np.empty((len(channels), n_samples))
        self.buf.fill(0.0)
        self.dropped_blocks = 0
        self.flushed = 0
        self._written = 0
        self._queued_hi = 0
        self._avoid_cpu = avoid_cpu
        self._queue: deque[tuple[int, int]] = deque()
        self._wake = threading.Event()
        self._stop = False
        self._thread: threading.Thread | None = None
        self._files = None
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._files = [
                open(self.out_dir / f"ch{k:03d}.f64", "wb", buffering=0)
                for k in range(len(channels))
            ]
            self._write_index(0)
            self._thread = threading.Thread(target=self._writer_loop,
                                            name="recorder-writer",
                                            daemon=True)
            self._thread.start()

    # -- producer side (step path) ---------------------------------------

    def mark(self, k: int) -> None:
        """Declare sample k complete; hands off full blocks, never blocks."""
        self._written = k + 1
        if self._files is None:
            return
        if self._written - self._queued_hi >= BLOCK \
                or self._written == self.n_samples:
            if len(self._queue) >= QUEUE_DEPTH:
                self.dropped_blocks += 1
                return
            self._queue.append((self._queued_hi, self._written))
            self._queued_hi = self._written
            self._wake.set()

    # -- writer side -------------------------------------------------------

    def _writer_loop(self) -> None:
        if self._avoid_cpu is not None:
            try:
                cpus = os.sched_getaffinity(0) - {self._avoid_cpu}
                if cpus:
                    os.sched_setaffinity(0, cpus)
            except (AttributeError, OSError):
                pass
        last_index = 0.0
        while True:
            # block handoffs signal the event; a long idle timeout keeps
            # this thread from waking (and touching the interpreter lock)
            # next to the paced loop
            self._wake.wait(timeout=5.0)
            self._wake.clear()
            progressed = False
            while self._queue:
                lo, hi = self._queue.popleft()
                for k, fh in enumerate(self._files):
                    # row slices are contiguous: the unbuffered write takes
                    # the buffer directly and drops the interpreter lock
                    # for the syscall, so the step thread never stalls on
                    # a flush copy
                    fh.write(self.buf[k, lo:hi])
                self.flushed = hi
                progressed = True
            now = time.monotonic()
            if progressed and (now - last_index >= 0.5 or self._stop):
                self._write_index(self.flushed)
                last_index = now
            if self._stop and not self._queue:
                return

    def _write_index(self, samples: int) -> None:
        index = {
            "dt": self.dt,
            "n_samples_planned": self.n_samples,
            "channels": [
                {
                    "id": ch.channel_id,
                    "label": ch.label,
                    "units": ch.units,
                    "samples": samples,
                    "dt": self.dt,
                    "file": f"ch{k:03d}.f64",
                }
                for k, ch in enumerate(self.channels)
            ],
        }
        tmp = self.out_dir / (INDEX_NAME + ".tmp")
        tmp.write_text(json.dumps(index, indent=1))
        os.replace(tmp, self.out_dir / INDEX_NAME)

    def close(self) -> None:
        if self._files is None:
            return
        if self._written > self._queued_hi:
            self._queue.append((self._queued_hi, self._written))
            self._queued_hi = self._written
        self._stop = True
        self._wake.set()
        self._thread.join(timeout=10)
        for fh in self._files:
            fh.close()
        self._write_index(self.flushed)
        self._files = None


def load_index(store_dir: Path | str) -> dict:
    return json.loads((Path(store_dir) / INDEX_NAME).read_text())


def load_channel(store_dir: Path | str, channel_id: str) -> np.ndarray:
    index = load_index(store_dir)
    for entry in index["channels"]:
        if entry["id"] == channel_id:
            raw = (Path(store_dir) / entry["file"]).read_bytes()
            return np.frombuffer(raw, dtype="<f8")
    raise KeyError(f"channel {channel_id!r} not in store")


def minmax_decimate(values: np.ndarray, buckets: int
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Alias-safe decimation: per bucket emit (min, max); returns
    (bucket_start_index, mins, maxs). Preserves global extremes exactly."""
    n = len(values)
    if buckets >= n:
        idx = np.arange(n)
        return idx, values.copy(), values.copy()
    edges = np.linspace(0, n, buckets + 1).astype(np.int64)
    mins = np.empty(buckets)
    maxs = np.empty(buckets)
    for b in range(buckets):
        seg = values[edges[b]:edges[b + 1]]
        mins[b] = seg.min()
        maxs[b] = seg.max()
    return edges[:-1], mins, maxs
