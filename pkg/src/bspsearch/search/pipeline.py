"""Threaded loader (R), search (I) and writer (K) lanes for one worker.

Lanes take their role from the shared scheduler state: general lane ``j`` is
a loader while ``j < lanes_r`` and a searcher otherwise.  Roles are checked
between work items only.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..chem import SearchConfig
from ..database import FragmentIonIndex
from ..spectra import BatchDescriptor, BatchIndex, SpectrumBatch, read_batch
from .engine import BatchResult, SearchCounters, search_batch
from .results import write_heaps, write_result_file
from .scheduler import NUM_BUFFERS, SchedulerState, TickRecord, region, schedule_tick

POLL = 0.01


class PipelineError(RuntimeError):
    pass


@dataclass
class Buffer:
    slot: int
    batch: SpectrumBatch | None = None
    desc: BatchDescriptor | None = None


@dataclass
class ResultBuffer:
    slot: int
    result: BatchResult | None = None


class BufferQueues:
    """q_f (filled), q_r (recycled, seeded with empty buffers), q_k (results)
    and q_k' (recycled result buffers)."""

    def __init__(self, buffers: int = NUM_BUFFERS, result_buffers: int = NUM_BUFFERS):
        self.capacity = buffers
        self.q_f: queue.Queue[Buffer] = queue.Queue(maxsize=buffers)
        self.q_r: queue.Queue[Buffer] = queue.Queue(maxsize=buffers)
        self.q_k: queue.Queue[ResultBuffer | None] = queue.Queue()
        self.q_k_prime: queue.Queue[ResultBuffer] = queue.Queue(maxsize=result_buffers)
        for i in range(buffers):
            self.q_r.put(Buffer(i))
        for i in range(result_buffers):
            self.q_k_prime.put(ResultBuffer(i))
        self.result_buffers = result_buffers

    def region(self) -> str:
        return region(self.q_f.qsize())

    def full(self) -> bool:
        return self.q_f.qsize() >= self.capacity


def subtask_r_step(index: BatchIndex, queues: BufferQueues, preempted) -> str:
    """One pass of the loader loop.

    Returns ``"loaded"``, ``"preempted"``, ``"no-buffer"`` or ``"done"``.  A
    descriptor is only kept when a buffer is available and the lane still
    holds the loader role; otherwise it goes back on the reclaim stack.
    """
    desc = index.pop()
    if desc is None:
        return "done"
    if preempted():
        index.push_back(desc)
        return "preempted"
    try:
        buf = queues.q_r.get_nowait()
    except queue.Empty:
        index.push_back(desc)
        return "no-buffer"
    try:
        buf.batch = read_batch(desc.path)
    except Exception:
        queues.q_r.put(buf)
        index.push_back(desc)
        raise
    buf.desc = desc
    queues.q_f.put(buf)
    return "loaded"


@dataclass
class SearchStats:
    counters: SearchCounters = field(default_factory=SearchCounters)
    ticks: list[TickRecord] = field(default_factory=list)
    batches: int = 0
    io_seconds: float = 0.0
    wait_seconds: float = 0.0
    write_retries: int = 0


def write_batch_result(out_dir, rank: int, result: BatchResult, top_m: int, stats: SearchStats | None = None) -> None:
    """Write the ``.hrb`` file and heap file for one batch, retrying once."""
    for attempt in (0, 1):
        try:
            write_result_file(out_dir, result.tag, rank, result.partials)
            ids, scores = result.heap_arrays(top_m)
            write_heaps(out_dir, result.tag, rank, ids, scores)
            return
        except OSError:
            if attempt:
                raise
            if stats is not None:
                stats.write_retries += 1


class SearchPipeline:
    def __init__(
        self,
        index: FragmentIonIndex,
        batches: BatchIndex,
        config: SearchConfig,
        out_dir: str | os.PathLike,
        rank: int = 0,
        cores: int = 2,
        t_min: float = 0.05,
        t_max: float = 2.0,
        alpha: float = 0.5,
        beta: float = 0.5,
        fail_after: int | None = None,
    ):
        self.index = index
        self.batches = batches
        self.config = config
        self.out_dir = Path(out_dir)
        self.rank = rank
        self.state = SchedulerState.initial(cores, t_min=t_min, t_max=t_max, alpha=alpha, beta=beta)
        self.queues = BufferQueues()
        self.stats = SearchStats()
        self.fail_after = fail_after
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._errors: list[BaseException] = []
        self._searched = 0
        self._t0 = 0.0

    @property
    def total(self) -> int:
        return len(self.batches)

    def _role(self, lane: int) -> str:
        with self._lock:
            return "R" if lane < self.state.lanes_r else "I"

    def _tick(self, t_wait: float) -> None:
        with self._lock:
            reg = self.queues.region()
            decision = schedule_tick(self.state, reg, self.queues.full(), self.batches.exhausted(), t_wait)
            self.stats.ticks.append(
                TickRecord(time.perf_counter() - self._t0, t_wait, self.state.t_cum, self.state.t_fct,
                           self.state.lanes_r, self.state.lanes_i, reg, decision.action, decision.c_ir)
            )
            self.stats.wait_seconds += t_wait

    def _general_lane(self, lane: int) -> None:
        while not self._stop.is_set():
            with self._lock:
                if self._searched >= self.total:
                    return
            if self._role(lane) == "R":
                t = time.perf_counter()
                outcome = subtask_r_step(self.batches, self.queues, lambda: self._role(lane) != "R")
                if outcome == "loaded":
                    with self._lock:
                        self.stats.io_seconds += time.perf_counter() - t
                else:
                    time.sleep(POLL)
                continue
            t = time.perf_counter()
            try:
                buf = self.queues.q_f.get(timeout=POLL * 5)
            except queue.Empty:
                # keep the scheduler informed while starving
                self._tick(time.perf_counter() - t)
                continue
            self._tick(time.perf_counter() - t)
            result = search_batch(buf.batch, self.index, self.config)
            rbuf = None
            while rbuf is None:
                if self._stop.is_set():
                    return
                try:
                    rbuf = self.queues.q_k_prime.get(timeout=POLL * 5)
                except queue.Empty:
                    pass
            rbuf.result = result
            self.batches.mark_consumed(buf.desc)
            buf.batch = buf.desc = None
            self.queues.q_r.put(buf)
            self.queues.q_k.put(rbuf)
            with self._lock:
                self.stats.counters.merge(result.counters)
                self._searched += 1
                self.stats.batches += 1
                if self.fail_after is not None and self._searched >= self.fail_after:
                    raise PipelineError(f"injected failure on rank {self.rank} after {self._searched} batches")

    def _writer_lane(self) -> None:
        while True:
            rbuf = self.queues.q_k.get()
            if rbuf is None:
                return
            t = time.perf_counter()
            write_batch_result(self.out_dir, self.rank, rbuf.result, self.config.top_m, self.stats)
            with self._lock:
                self.stats.io_seconds += time.perf_counter() - t
            rbuf.result = None
            self.queues.q_k_prime.put(rbuf)

    def _guard(self, fn, *args):
        try:
            fn(*args)
        except BaseException as exc:  # surfaced by run()
            with self._lock:
                self._errors.append(exc)
            self._stop.set()

    def run(self) -> SearchStats:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._t0 = time.perf_counter()
        general = self.state.lanes_r + self.state.lanes_i
        lanes = [threading.Thread(target=self._guard, args=(self._general_lane, j), daemon=True) for j in range(general)]
        writers = [threading.Thread(target=self._guard, args=(self._writer_lane,), daemon=True) for _ in range(self.state.lanes_k)]
        for t in lanes + writers:
            t.start()
        for t in lanes:
            t.join()
        for _ in writers:
            self.queues.q_k.put(None)
        for t in writers:
            t.join()
        if self._errors:
            raise self._errors[0]
        if self.queues.q_r.qsize() != self.queues.capacity or self.queues.q_f.qsize():
            raise PipelineError("batch buffers leaked")
        if self.queues.q_k_prime.qsize() != self.queues.result_buffers:
            raise PipelineError("result buffers leaked")
        return self.stats


def run_search(
    index: FragmentIonIndex, batches: BatchIndex, config: SearchConfig, out_dir, rank: int = 0, cores: int = 2, **kw
) -> SearchStats:
    return SearchPipeline(index, batches, config, out_dir, rank, cores, **kw).run()


def run_search_serial(index: FragmentIonIndex, batches: BatchIndex, config: SearchConfig, out_dir, rank: int = 0) -> SearchStats:
    """Reference path without lanes: same outputs, one batch at a time."""
    stats = SearchStats()
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    while (desc := batches.pop()) is not None:
        result = search_batch(read_batch(desc.path), index, config)
        write_batch_result(out_dir, rank, result, config.top_m, stats)
        batches.mark_consumed(desc)
        stats.counters.merge(result.counters)
        stats.batches += 1
    return stats
