"""Placement of worker tasks on multicore nodes."""

from __future__ import annotations

import os
from dataclasses import dataclass

DEFAULT_MAX_ENTRIES_PER_TASK = 48_000_000
MEMORY_FRACTION = 0.70

SPEC_KEYS = {
    "lambda_bytes": "shared_mem_per_node",
    "numa": "numa_per_node",
    "cores_per_numa": "cores_per_numa",
    "sockets": "sockets_per_node",
    "cores_per_socket": "cores_per_socket",
    "nodes": "nodes",
}


class InsufficientMemory(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    shared_mem_per_node: int
    numa_per_node: int
    cores_per_numa: int
    sockets_per_node: int
    cores_per_socket: int
    nodes: int = 1

    def __post_init__(self):
        for name in SPEC_KEYS.values():
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class TaskMapping:
    tasks_per_node: int
    cores_per_task: int
    bind_level: int
    bind_policy: str = "scatter"

    def as_dict(self) -> dict:
        return {
            "tasks_per_node": self.tasks_per_node,
            "cores_per_task": self.cores_per_task,
            "bind_level": self.bind_level,
            "bind_policy": self.bind_policy,
        }


def next_lower_factor(n: int, below: int) -> int:
    """Largest divisor of ``n`` strictly smaller than ``below`` (at least 1)."""
    for d in range(min(below - 1, n), 0, -1):
        if n % d == 0:
            return d
    return 1


def task_mapping(
    spec: ClusterSpec,
    database_size: float,
    partitions: int,
    max_entries_per_task: float = DEFAULT_MAX_ENTRIES_PER_TASK,
    entry_bytes: float = 1.0,
    trace: list | None = None,
) -> TaskMapping:
    """Tasks per node and cores per task for a database of ``database_size`` entries.

    Starts with one task per NUMA domain or socket (whichever is larger) on
    the smaller of the two core groups, then trades cores for tasks - one
    factor step at a time, never below half the starting cores - while a
    task would hold more than ``max_entries_per_task`` entries.
    ``entry_bytes`` converts entries to bytes for the memory check.
    """
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    lam = spec.shared_mem_per_node
    if database_size * entry_bytes / partitions > MEMORY_FRACTION * lam:
        raise InsufficientMemory(
            f"insufficient memory: {database_size * entry_bytes / partitions:.3g} bytes per task "
            f"> {MEMORY_FRACTION:.2f} x {lam} bytes"
        )
    u, s = spec.numa_per_node, spec.sockets_per_node
    t_bl = max(u, s)
    t_c = min(spec.cores_per_numa, spec.cores_per_socket)
    t_n = max(u, s)
    t_max = t_c
    if trace is not None:
        trace.append((t_n, t_c))
    while database_size / t_n > max_entries_per_task:
        n_poss = next_lower_factor(t_max, t_c)
        if n_poss >= t_max / 2 and n_poss < t_c:
            t_n = t_n * t_c // n_poss
            t_c = n_poss
            if trace is not None:
                trace.append((t_n, t_c))
        else:
            break
    return TaskMapping(t_n, t_c, t_bl, "scatter")


def parse_spec(text: str) -> ClusterSpec:
    """Parse a key=value machine description (``#`` starts a comment)."""
    values: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in SPEC_KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            values[SPEC_KEYS[key]] = int(value)
        except ValueError:
            raise ValueError(f"line {lineno}: {key} must be an integer") from None
    missing = [k for k, v in SPEC_KEYS.items() if v not in values and k != "nodes"]
    if missing:
        raise ValueError(f"missing keys: {', '.join(missing)}")
    return ClusterSpec(**values)


def read_spec(path: str | os.PathLike) -> ClusterSpec:
    with open(path) as fh:
        return parse_spec(fh.read())
