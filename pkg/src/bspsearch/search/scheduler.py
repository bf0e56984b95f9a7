"""Lane scheduler for the loader/search/writer pipeline.

The search side calls :func:`schedule_tick` after every pop from the
filled-buffer queue.  Waits are forecast with double exponential smoothing
and lanes move between the loader (R) and search (I) roles; the two writer
(K) lanes are fixed.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable

W1, W2, W3 = "w1", "w2", "w3"
K_LANES = 2
NUM_BUFFERS = 20
W2_START = 5
W3_START = 15


def forecast(level: float, trend: float, observation: float, alpha: float, beta: float) -> tuple[float, float, float]:
    """One double-exponential-smoothing step: ``(level', trend', forecast)``."""
    if not (0 < alpha <= 1 and 0 < beta <= 1):
        raise ValueError("alpha and beta must lie in (0, 1]")
    new_level = alpha * observation + (1 - alpha) * (level + trend)
    new_trend = beta * (new_level - level) + (1 - beta) * trend
    return new_level, new_trend, new_level + new_trend


def region(queue_length: int) -> str:
    if queue_length < W2_START:
        return W1
    if queue_length < W3_START:
        return W2
    return W3


@dataclass
class SchedulerState:
    pool_size: int
    lanes_r: int
    lanes_i: int
    lanes_k: int = K_LANES
    t_wait: float = 0.0
    t_cum: float = 0.0
    t_fct: float = 0.0
    level: float = 0.0
    trend: float = 0.0
    alpha: float = 0.5
    beta: float = 0.5
    t_min: float = 0.05
    t_max: float = 2.0
    ticks: int = 0

    @classmethod
    def initial(cls, cores: int, **kw) -> "SchedulerState":
        """Pool of ``cores + 2`` lanes: two writers, two loaders, the rest search."""
        cores = max(2, int(cores))
        lanes_i = max(1, cores - 2)
        return cls(pool_size=cores + K_LANES, lanes_r=cores - lanes_i, lanes_i=lanes_i, **kw)

    def check(self) -> None:
        if self.lanes_r + self.lanes_i + self.lanes_k != self.pool_size:
            raise AssertionError(f"lane counts {self.lanes_r}+{self.lanes_i}+{self.lanes_k} != {self.pool_size}")
        if self.lanes_k != K_LANES or self.lanes_i < 1 or self.lanes_r < 0:
            raise AssertionError(f"invalid lane counts r={self.lanes_r} i={self.lanes_i} k={self.lanes_k}")


def move_i_to_r(state: SchedulerState, t_wait: float, current: str) -> bool:
    """The I->R condition, evaluated on already-updated forecasts."""
    slow = t_wait >= state.t_min and state.t_cum + state.t_fct > state.t_max
    starving = current == W1 and state.lanes_r == 0
    return slow or starving


@dataclass(frozen=True)
class TickDecision:
    action: str  # "I->R", "R->I", "release" or ""
    c_ir: bool
    lanes_r: int
    lanes_i: int


def schedule_tick(
    state: SchedulerState, current: str, q_full: bool, exhausted: bool, t_wait: float = 0.0
) -> TickDecision:
    """Update the wait forecast and apply at most one lane reallocation."""
    state.ticks += 1
    state.t_wait = t_wait
    state.level, state.trend, state.t_fct = forecast(state.level, state.trend, t_wait, state.alpha, state.beta)
    state.t_cum += t_wait
    c_ir = move_i_to_r(state, t_wait, current)
    action = ""
    if q_full or exhausted:
        if state.lanes_r:
            state.lanes_i += state.lanes_r
            state.lanes_r = 0
            action = "release"
    elif c_ir and state.lanes_i > 1:
        state.lanes_i -= 1
        state.lanes_r += 1
        state.t_cum = 0.0
        action = "I->R"
    elif current == W3 and state.lanes_r > 1:
        state.lanes_r -= 1
        state.lanes_i += 1
        action = "R->I"
    state.check()
    return TickDecision(action, c_ir, state.lanes_r, state.lanes_i)


@dataclass
class TickRecord:
    timestamp: float
    t_wait: float
    t_cum: float
    t_fct: float
    lanes_r: int
    lanes_i: int
    region: str
    action: str = ""
    c_ir: bool = False

    HEADER = "timestamp\tt_wait\tt_cum\tt_fct\tlanes_r\tlanes_i\tregion"

    def tsv(self) -> str:
        return (
            f"{self.timestamp:.6f}\t{self.t_wait:.6f}\t{self.t_cum:.6f}\t{self.t_fct:.6f}\t"
            f"{self.lanes_r}\t{self.lanes_i}\t{self.region}"
        )


def write_tick_log(path, records: list[TickRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("# schema=TickRecord version=1\n")
        fh.write(TickRecord.HEADER + "\n")
        for r in records:
            fh.write(r.tsv() + "\n")


@dataclass
class SimulatedPipeline:
    """Discrete-event model of loader and search lanes sharing a bounded queue.

    ``produce_time(n)`` and ``consume_time(n)`` give the service time of the
    n-th batch loaded or searched.  Lane counts follow the scheduler state;
    a lane leaving a role finishes its current item first.
    """

    state: SchedulerState
    batches: int
    produce_time: Callable[[int], float]
    consume_time: Callable[[int], float]
    capacity: int = NUM_BUFFERS
    records: list[TickRecord] = field(default_factory=list)

    def run(self, max_ticks: int | None = None) -> list[TickRecord]:
        now = 0.0
        seq = 0
        events: list = []
        queued = 0
        to_load = self.batches
        loaded = searched = 0
        busy_r = 0  # loaders with an item in hand
        active_i = 0
        waiting: list[float] = []  # request times of idle search lanes

        def push(t, kind):
            nonlocal seq
            heapq.heappush(events, (t, seq, kind))
            seq += 1

        def start_loaders():
            nonlocal busy_r, to_load, loaded
            while busy_r < self.state.lanes_r and to_load > 0 and queued + busy_r < self.capacity:
                busy_r += 1
                to_load -= 1
                push(now + self.produce_time(loaded), "loaded")
                loaded += 1

        def start_searchers():
            nonlocal active_i
            while active_i < self.state.lanes_i:
                active_i += 1
                push(now, "want")

        def tick(t_wait):
            decision = schedule_tick(
                self.state, region(queued), queued >= self.capacity, to_load == 0, t_wait
            )
            self.records.append(
                TickRecord(now, t_wait, self.state.t_cum, self.state.t_fct, self.state.lanes_r,
                           self.state.lanes_i, region(queued), decision.action, decision.c_ir)
            )

        def take(requested):
            nonlocal queued, searched
            queued -= 1
            tick(now - requested)
            push(now + self.consume_time(searched), "searched")
            searched += 1

        start_loaders()
        start_searchers()
        while events and searched < self.batches:
            if max_ticks is not None and len(self.records) >= max_ticks:
                break
            now, _, kind = heapq.heappop(events)
            if kind == "loaded":
                busy_r -= 1
                queued += 1
                if waiting:
                    take(waiting.pop(0))
            elif kind == "searched":
                if active_i > self.state.lanes_i:
                    active_i -= 1
                else:
                    push(now, "want")
            elif kind == "want":
                if queued:
                    take(now)
                else:
                    waiting.append(now)
            # idle searchers beyond the current I share leave the role
            while waiting and active_i > self.state.lanes_i:
                waiting.pop()
                active_i -= 1
            start_loaders()
            start_searchers()
        return self.records


def fuzz_ticks(n: int, seed: int = 0, cores: int = 6) -> SchedulerState:
    """Drive :func:`schedule_tick` with random inputs, checking invariants each tick."""
    rng = random.Random(seed)
    state = SchedulerState.initial(cores)
    for _ in range(n):
        qlen = rng.randrange(NUM_BUFFERS + 1)
        schedule_tick(
            state, region(qlen), qlen == NUM_BUFFERS, rng.random() < 0.02, rng.expovariate(10.0)
        )
        state.check()
    return state
