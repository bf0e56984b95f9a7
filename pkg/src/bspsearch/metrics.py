"""Per-superstep timings, filter counters and the overhead decomposition."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

TIMING_FILE = "timings_{rank}.tsv"
COUNTER_FILE = "counters_{rank}.tsv"
TWAIT_FILE = "twait_{rank}.tsv"
SCHEMA_VERSION = 1


@dataclass
class SuperstepTiming:
    rank: int
    superstep: int
    wall_seconds: float = 0.0
    io_seconds: float = 0.0
    comm_seconds: float = 0.0
    wait_seconds: float = 0.0
    idle_at_barrier_seconds: float = 0.0
    serial_seconds: float = 0.0

    @property
    def busy_seconds(self) -> float:
        return max(0.0, self.wall_seconds - self.idle_at_barrier_seconds)

    def check(self) -> None:
        for name in ("io_seconds", "comm_seconds", "wait_seconds", "idle_at_barrier_seconds", "serial_seconds"):
            v = getattr(self, name)
            if v < 0 or v > self.wall_seconds + 1e-9:
                raise ValueError(f"{name}={v} outside [0, wall_seconds={self.wall_seconds}]")


@dataclass
class RankCounters:
    rank: int
    alpha: int = 0
    sigma: int = 0
    mu: int = 0
    queries: int = 0


def _write_rows(path: Path, rows: Sequence, cls) -> None:
    names = [f.name for f in fields(cls)]
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={cls.__name__} version={SCHEMA_VERSION}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])


def _read_rows(path: Path, cls) -> list:
    types = {f.name: f.type for f in fields(cls)}
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines, delimiter="\t")
    out = []
    for row in reader:
        kw = {k: (int(v) if types[k] in (int, "int") else float(v)) for k, v in row.items()}
        out.append(cls(**kw))
    return out


def write_timings(metrics_dir, rank: int, timings: Sequence[SuperstepTiming]) -> Path:
    path = Path(metrics_dir) / TIMING_FILE.format(rank=rank)
    _write_rows(path, timings, SuperstepTiming)
    return path


def write_counters(metrics_dir, counters: RankCounters) -> Path:
    path = Path(metrics_dir) / COUNTER_FILE.format(rank=counters.rank)
    _write_rows(path, [counters], RankCounters)
    return path


def read_rank_timings(metrics_dir, rank: int) -> list[SuperstepTiming]:
    path = Path(metrics_dir) / TIMING_FILE.format(rank=rank)
    return _read_rows(path, SuperstepTiming) if path.exists() else []


def read_rank_counters(metrics_dir, rank: int) -> RankCounters | None:
    path = Path(metrics_dir) / COUNTER_FILE.format(rank=rank)
    rows = _read_rows(path, RankCounters) if path.exists() else []
    return rows[0] if rows else None


def read_timings(metrics_dir) -> list[SuperstepTiming]:
    out = []
    for p in sorted(Path(metrics_dir).glob("timings_*.tsv")):
        out += _read_rows(p, SuperstepTiming)
    return out


def read_counters(metrics_dir) -> list[RankCounters]:
    out = []
    for p in sorted(Path(metrics_dir).glob("counters_*.tsv")):
        out += _read_rows(p, RankCounters)
    return out


@dataclass
class OverheadReport:
    ranks: int
    superstep_seconds: dict
    total_seconds: float
    load_imbalance_fraction: float
    comm_fraction: float
    io_fraction: float
    sched_fraction: float
    overhead_seconds: float
    serial_seconds: float
    parallel_seconds: float
    unattributed_seconds: float
    alpha: int = 0
    sigma: int = 0
    mu: int = 0

    def key_values(self) -> dict[str, str]:
        kv = {f"T{j}": f"{v:.6f}" for j, v in sorted(self.superstep_seconds.items())}
        for name, value in asdict(self).items():
            if name == "superstep_seconds":
                continue
            kv[name] = f"{value:.6f}" if isinstance(value, float) else str(value)
        return kv

    def summary(self) -> str:
        lines = [f"ranks: {self.ranks}"]
        for j, v in sorted(self.superstep_seconds.items()):
            lines.append(f"  superstep {j}: {v:10.3f} s")
        lines.append(f"  total T_H:   {self.total_seconds:10.3f} s")
        lines.append(f"load imbalance {self.load_imbalance_fraction:7.3f}")
        lines.append(f"comm fraction  {self.comm_fraction:7.3f}")
        lines.append(f"io fraction    {self.io_fraction:7.3f}")
        lines.append(f"sched fraction {self.sched_fraction:7.3f}")
        lines.append(f"candidates alpha={self.alpha} sigma={self.sigma} mu={self.mu}")
        lines.append("")
        lines += [f"{k}={v}" for k, v in self.key_values().items()]
        return "\n".join(lines)


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def overhead_report(timings: Iterable[SuperstepTiming], counters: Iterable[RankCounters] = ()) -> OverheadReport:
    """Combine per-rank timings into superstep maxima and overhead fractions.

    Reported ``T_j`` is the maximum wall time over ranks and ``T_H`` their
    sum.  Load imbalance uses each rank's busy (non-barrier) time in the
    search superstep.  Overhead is communication, I/O, scheduling waits and
    barrier idle time; the serial share is the measured replicated phases.
    """
    timings = list(timings)
    counters = list(counters)
    ranks = sorted({t.rank for t in timings})
    per: dict[int, list[SuperstepTiming]] = {}
    for t in timings:
        per.setdefault(t.superstep, []).append(t)
    T = {j: max(t.wall_seconds for t in ts) for j, ts in per.items()}
    total = sum(T.values())
    s3 = per.get(3, [])
    if len(s3) > 1:
        busy = [t.busy_seconds for t in s3]
        peak = max(busy)
        imbalance = (peak - sum(busy) / len(busy)) / peak if peak > 0 else 0.0
    else:
        imbalance = 0.0
    wall_sum = sum(t.wall_seconds for t in timings)
    comm = sum(t.comm_seconds for t in timings)
    io = sum(t.io_seconds for t in timings)
    idle = sum(t.idle_at_barrier_seconds for t in timings)
    wait = sum(t.wait_seconds for t in timings)
    sched = sum(t.wait_seconds / t.wall_seconds for t in s3 if t.wall_seconds > 0) / len(s3) if s3 else 0.0
    n = max(1, len(ranks))
    overhead = (comm + io + idle + wait) / n
    serial = max((sum(t.serial_seconds for t in timings if t.rank == r) for r in ranks), default=0.0)
    parallel = max(0.0, total - serial - overhead)
    mean_wall = wall_sum / n
    unattributed = max(0.0, mean_wall - overhead - serial - parallel)
    return OverheadReport(
        ranks=len(ranks),
        superstep_seconds=T,
        total_seconds=total,
        load_imbalance_fraction=_clamp(imbalance),
        comm_fraction=_clamp(comm / wall_sum) if wall_sum > 0 else 0.0,
        io_fraction=_clamp(io / wall_sum) if wall_sum > 0 else 0.0,
        sched_fraction=_clamp(sched),
        overhead_seconds=overhead,
        serial_seconds=serial,
        parallel_seconds=parallel,
        unattributed_seconds=unattributed,
        alpha=sum(c.alpha for c in counters),
        sigma=sum(c.sigma for c in counters),
        mu=sum(c.mu for c in counters),
    )


def report(metrics_dir: str | os.PathLike) -> OverheadReport:
    return overhead_report(read_timings(metrics_dir), read_counters(metrics_dir))
