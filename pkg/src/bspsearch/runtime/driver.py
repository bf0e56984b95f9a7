"""Superstep driver: runs database build, preprocessing, search and assembly
on every rank with a barrier after each superstep."""

from __future__ import annotations

import logging
import math
import multiprocessing as mp
import threading
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import assembly
from ..chem import describe_mods
from ..config import RunConfig, RunLayout, write_run_manifest
from ..database import (
    PeptideDatabase,
    build_index,
    generate_database,
    local_share,
    read_fasta,
    read_manifest,
    write_manifest,
)
from ..metrics import (
    RankCounters,
    SuperstepTiming,
    read_rank_counters,
    read_rank_timings,
    write_counters,
    write_timings,
)
from ..search.pipeline import PipelineError, SearchPipeline
from ..search.results import NO_ENTRY, heap_file_name, read_heaps, read_result_file, result_file_name
from ..search.scheduler import write_tick_log
from ..spectra import (
    ParseStats,
    drop_empty,
    load_index,
    make_batches,
    preprocess_batch,
    read_batch,
    read_ms2_files,
    write_preprocessed,
)
from .transport import InProcessCluster, SocketTransport, Transport

log = logging.getLogger(__name__)

SUPERSTEPS = (1, 2, 3, 4)


class InjectedFailure(RuntimeError):
    pass


class RankFailed(RuntimeError):
    pass


class MissingStageOutput(RuntimeError):
    """A superstep was run on its own before the one that feeds it."""


@dataclass
class RankOutcome:
    rank: int
    ok: bool
    error: str = ""
    timings: list[SuperstepTiming] = field(default_factory=list)
    counters: RankCounters | None = None


class Worker:
    """One rank's view of the run."""

    def __init__(
        self, cfg: RunConfig, rank: int, transport: Transport, layout: RunLayout, steps: tuple[int, ...] = SUPERSTEPS
    ):
        self.cfg = cfg
        self.steps = tuple(sorted(set(steps)))
        self.rank = rank
        self.P = cfg.partitions
        self.transport = transport
        self.layout = layout
        self.search_cfg = cfg.search_config()
        self.db_cfg = cfg.database_config()
        self.db: PeptideDatabase | None = None
        self.index = None
        self.batch_index = None
        self.timings: list[SuperstepTiming] = []
        self.counters = RankCounters(rank)
        self.parse_stats = ParseStats()

    def _maybe_fail(self, step: int) -> None:
        if self.cfg.debug_fail_rank == self.rank and self.cfg.debug_fail_superstep == step and step != 3:
            raise InjectedFailure(f"injected failure on rank {self.rank} in superstep {step}")

    def run(self) -> None:
        steps = {1: self.superstep1, 2: self.superstep2, 3: self.superstep3, 4: self.superstep4}
        try:
            for j in self.steps:
                if j >= 3 and self.index is None:
                    self.load_partition()
                if j == 4 and self.batch_index is None:
                    self.batch_index = self._load_batches()
                timing = SuperstepTiming(self.rank, j)
                comm0 = self.transport.comm_seconds
                t0 = time.perf_counter()
                self._maybe_fail(j)
                steps[j](timing)
                t1 = time.perf_counter()
                self.transport.barrier()
                t2 = time.perf_counter()
                timing.wall_seconds = t2 - t0
                timing.idle_at_barrier_seconds = t2 - t1
                timing.comm_seconds = self.transport.comm_seconds - comm0
                # lanes overlap, so summed component times are capped at the wall time
                for name in ("io_seconds", "comm_seconds", "wait_seconds", "serial_seconds"):
                    setattr(timing, name, min(getattr(timing, name), timing.wall_seconds))
                self.timings.append(timing)
        finally:
            self.flush_metrics()

    def flush_metrics(self) -> None:
        """Write this invocation's timings, keeping rows of supersteps that an
        earlier partial run already recorded."""
        try:
            done = {t.superstep for t in self.timings}
            kept = [t for t in read_rank_timings(self.layout.metrics, self.rank) if t.superstep not in done]
            rows = sorted(kept + self.timings, key=lambda t: t.superstep)
            write_timings(self.layout.metrics, self.rank, rows)
            counters = self.counters
            if 3 not in self.steps:
                counters = read_rank_counters(self.layout.metrics, self.rank) or counters
            write_counters(self.layout.metrics, counters)
        except (OSError, ValueError):
            log.exception("rank %d: could not flush metrics", self.rank)

    def _generate(self) -> None:
        proteins = []
        for path in self.cfg.fasta_files:
            proteins += read_fasta(path)
        self.db = generate_database(proteins, self.db_cfg)

    def load_partition(self) -> None:
        """Rebuild the index from the partition manifest of an earlier run."""
        path = self.layout.parts / f"part_{self.rank}.hcp"
        if not path.exists():
            raise MissingStageOutput(f"{path} not found; run build-db first")
        partitions, rank, local = read_manifest(path)
        if partitions != self.P or rank != self.rank:
            raise MissingStageOutput(f"{path.name} was built for P={partitions}, not P={self.P}; rerun build-db")
        self._generate()
        expected = local_share(self.db, self.rank, self.P, self.cfg.scatter, self.cfg.seed)
        if not np.array_equal(expected.global_id, local.global_id):
            raise MissingStageOutput(f"{path.name} does not match the configured database; rerun build-db")
        self.index = build_index(local, self.db.bases, self.db.ptms)

    def _load_batches(self):
        if not (self.layout.batches / "index.json").exists():
            raise MissingStageOutput(f"no batch index in {self.layout.batches}; run preprocess first")
        return load_index(self.layout.batches)

    # superstep 1 -------------------------------------------------------
    def superstep1(self, timing: SuperstepTiming) -> None:
        t = time.perf_counter()
        self._generate()
        local = local_share(self.db, self.rank, self.P, self.cfg.scatter, self.cfg.seed)
        timing.serial_seconds = time.perf_counter() - t
        t = time.perf_counter()
        write_manifest(self.layout.parts / f"part_{self.rank}.hcp", local, self.P, self.rank)
        timing.io_seconds = time.perf_counter() - t
        self.index = build_index(local, self.db.bases, self.db.ptms)

    # superstep 2 -------------------------------------------------------
    def superstep2(self, timing: SuperstepTiming) -> None:
        t = time.perf_counter()
        spectra = drop_empty(read_ms2_files(self.cfg.ms2_files, self.parse_stats), self.parse_stats)
        batches = make_batches(spectra, self.P, self.search_cfg.batch_cap, ",".join(self.cfg.ms2_files))
        timing.serial_seconds = time.perf_counter() - t
        t = time.perf_counter()
        write_preprocessed(
            batches,
            self.layout.batches,
            owned=lambda tag: tag % self.P == self.rank,
            prepare=lambda b: preprocess_batch(b, self.search_cfg),
            write_index=self.rank == 0,
        )
        timing.io_seconds = time.perf_counter() - t

    # superstep 3 -------------------------------------------------------
    def superstep3(self, timing: SuperstepTiming) -> None:
        self.batch_index = self._load_batches()
        fail_after = None
        if self.cfg.debug_fail_rank == self.rank and self.cfg.debug_fail_superstep == 3:
            fail_after = 1
        pipe = SearchPipeline(
            self.index, self.batch_index, self.search_cfg, self.layout.results, self.rank, self.cfg.cores,
            t_min=self.cfg.t_min, t_max=self.cfg.t_max, alpha=self.cfg.alpha, beta=self.cfg.beta,
            fail_after=fail_after,
        )
        try:
            stats = pipe.run()
        finally:
            write_tick_log(self.layout.metrics / f"twait_{self.rank}.tsv", pipe.stats.ticks)
        c = stats.counters
        self.counters.alpha, self.counters.sigma, self.counters.mu, self.counters.queries = c.alpha, c.sigma, c.mu, c.queries
        timing.io_seconds = stats.io_seconds
        timing.wait_seconds = stats.wait_seconds

    # superstep 4 -------------------------------------------------------
    def assemble_owned(self) -> list[assembly.QueryEvalue]:
        by_tag = self.batch_index.by_tag()
        owned = sorted(assembly.claim_tags(by_tag, self.rank, self.P))
        out = []
        width = self.search_cfg.histogram_bin_width
        for tag in owned:
            qids = by_tag[tag].spectrum_ids
            per_rank = []
            for r in range(self.P):
                path = self.layout.results / result_file_name(tag, r)
                if not path.exists():
                    raise assembly.AssemblyError(f"missing result file {path.name} for owned tag {tag}")
                per_rank.append(read_result_file(path, qids)[2])
            for i in range(len(qids)):
                dist = assembly.assemble([(r, per_rank[r][i]) for r in range(self.P)], self.search_cfg.histogram_bins)
                out.append(assembly.score_query(
                    dist, width, self.cfg.fit, self.cfg.verbose_fit, min_survival=self.cfg.tail_min_survival
                ))
        return out

    def superstep4(self, timing: SuperstepTiming) -> None:
        received: dict[int, bytes] = {}
        errors: list[BaseException] = []

        def receive():
            try:
                for _ in range(self.P - 1):
                    src, payload = self.transport.recv()
                    if src in received:
                        raise assembly.AssemblyError(f"rank {self.rank}: second message from rank {src}")
                    received[src] = payload
            except BaseException as exc:
                errors.append(exc)

        receiver = threading.Thread(target=receive, daemon=True)
        receiver.start()
        results = self.assemble_owned()
        groups = assembly.group_by_origin(results, self.P)
        for dst in range(self.P):
            if dst != self.rank:
                self.transport.send(dst, assembly.encode_routed(groups[dst]))
        receiver.join(self.cfg.timeout)
        if receiver.is_alive():
            raise assembly.AssemblyError(
                f"rank {self.rank}: missing messages from ranks "
                f"{sorted(set(range(self.P)) - set(received) - {self.rank})} after {self.cfg.timeout}s"
            )
        if errors:
            raise errors[0]
        # local records go through the same 16-byte encoding as routed ones
        received[self.rank] = assembly.encode_routed(groups[self.rank])
        self.transport.barrier()
        t = time.perf_counter()
        self.write_psms(received)
        timing.io_seconds = time.perf_counter() - t

    def write_psms(self, received: dict[int, bytes]) -> None:
        """Join routed e-values with the local top hit and spectrum metadata."""
        records = np.concatenate([assembly.decode_routed(received[r]) for r in sorted(received)])
        locate = {}
        for desc in self.batch_index.descriptors:
            for pos, qid in enumerate(desc.spectrum_ids):
                locate[qid] = (desc.tag, pos)
        need = {}
        for rec in records:
            tag, pos = locate[int(rec["query_id"])]
            need.setdefault(tag, []).append((pos, rec))
        psms = []
        for tag, items in sorted(need.items()):
            ids, scores = read_heaps(self.layout.results / heap_file_name(tag, self.rank))
            desc = self.batch_index.by_tag()[tag]
            batch = read_batch(desc.path)
            for pos, rec in items:
                gid = int(ids[pos, 0])
                spec = batch.spectra[pos]
                if gid == NO_ENTRY or np.float32(scores[pos, 0]) != np.float32(rec["g_max"]):
                    raise assembly.AssemblyError(
                        f"rank {self.rank}: local heap does not hold the top hit of spectrum {int(rec['query_id'])}"
                    )
                ev = float(rec["e_value"])
                seq = self.db.sequence(gid)
                mask = int(self.db.entries.mod_mask[gid])
                psms.append(
                    assembly.Psm(
                        spectrum_id=int(rec["query_id"]),
                        scan=desc.scans[pos] if desc.scans else spec.scan,
                        peptide=seq,
                        mods=describe_mods(seq, mask, self.db.ptms),
                        calc_mass=float(self.db.entries.precursor_mass[gid]),
                        precursor_mass=spec.precursor_mass,
                        charge=spec.charge,
                        hyperscore=float(rec["g_max"]),
                        e_value=ev,
                        candidate_total=int(rec["candidate_total"]),
                        origin_rank=self.rank,
                        flags=assembly.PSM_FLAG_NO_FIT if math.isnan(ev) else 0,
                    )
                )
        assembly.write_psms(self.layout.psms / assembly.psm_file_name(self.rank), psms)


@dataclass
class PipelineResult:
    status: int
    outcomes: list[RankOutcome]
    layout: RunLayout
    seconds: float

    @property
    def ok(self) -> bool:
        return self.status == 0

    def psm_paths(self) -> list[Path]:
        return [self.layout.psms / assembly.psm_file_name(r) for r in range(len(self.outcomes))]


# outputs invalidated by re-running each superstep
STEP_OUTPUTS = {1: ("parts",), 2: ("batches",), 3: ("results",), 4: ("psms",)}


def prepare_run(
    cfg: RunConfig, root: str | Path | None = None, clean_results: bool = True, steps: tuple[int, ...] = SUPERSTEPS
) -> RunLayout:
    layout = RunLayout(Path(root) if root else cfg.run_path()).create()
    if clean_results:
        dirs = ["comm"] + [d for j in steps for d in STEP_OUTPUTS[j]]
        if 1 in steps:
            dirs.append("metrics")
        for name in dirs:
            for p in getattr(layout, name).iterdir():
                if p.is_file():
                    p.unlink()
        # metrics of ranks beyond the current world size belong to an older run
        for p in layout.metrics.glob("*_*.tsv"):
            rank = p.stem.rsplit("_", 1)[-1]
            if rank.isdigit() and int(rank) >= cfg.partitions:
                p.unlink()
    write_run_manifest(layout, cfg, {"steps": list(steps)})
    return layout


def _run_in_process(cfg: RunConfig, layout: RunLayout, steps: tuple[int, ...]) -> list[RankOutcome]:
    cluster = InProcessCluster(cfg.partitions, timeout=cfg.timeout)
    outcomes = [RankOutcome(r, False) for r in range(cfg.partitions)]

    def body(rank: int):
        worker = Worker(cfg, rank, cluster.transport(rank), layout, steps)
        try:
            worker.run()
            outcomes[rank].ok = True
        except BaseException as exc:
            outcomes[rank].error = f"{type(exc).__name__}: {exc}"
            log.debug("rank %d failed:\n%s", rank, traceback.format_exc())
            cluster.abort()
        outcomes[rank].timings = worker.timings
        outcomes[rank].counters = worker.counters

    threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in range(cfg.partitions)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return outcomes


def _process_main(cfg: RunConfig, rank: int, root: str, steps: tuple[int, ...], status) -> None:
    layout = RunLayout(Path(root))
    transport = SocketTransport(rank, cfg.partitions, layout.comm, timeout=cfg.timeout)
    try:
        Worker(cfg, rank, transport, layout, steps).run()
        status.put((rank, True, ""))
    except BaseException as exc:
        status.put((rank, False, f"{type(exc).__name__}: {exc}"))
        raise SystemExit(1)
    finally:
        transport.close()


def _run_multi_process(cfg: RunConfig, layout: RunLayout, steps: tuple[int, ...]) -> list[RankOutcome]:
    ctx = mp.get_context("spawn")
    status = ctx.Queue()
    procs = [ctx.Process(target=_process_main, args=(cfg, r, str(layout.root), steps, status), daemon=True) for r in range(cfg.partitions)]
    for p in procs:
        p.start()
    outcomes = {r: RankOutcome(r, False, "no status reported") for r in range(cfg.partitions)}
    deadline = time.monotonic() + cfg.timeout * 8
    pending = set(range(cfg.partitions))
    failed = False
    while pending and time.monotonic() < deadline:
        try:
            rank, ok, err = status.get(timeout=0.2)
        except Exception:
            if any(p.exitcode not in (None, 0) for p in procs):
                failed = True
            if failed and all(p.exitcode is not None for p in procs if p.pid):
                break
            if failed:
                for p in procs:
                    if p.is_alive():
                        p.terminate()
            continue
        outcomes[rank] = RankOutcome(rank, ok, err)
        pending.discard(rank)
        if not ok:
            failed = True
            for p in procs:
                if p.is_alive():
                    p.terminate()
    for p in procs:
        p.join(5)
        if p.is_alive():
            p.kill()
            p.join()
    return [outcomes[r] for r in range(cfg.partitions)]


def run_pipeline(
    cfg: RunConfig, root: str | Path | None = None, steps: tuple[int, ...] = SUPERSTEPS
) -> PipelineResult:
    """Run the given supersteps (default: all four) on ``cfg.partitions``
    ranks; status 0 iff every rank succeeded."""
    steps = tuple(sorted(set(steps)))
    if not steps or not set(steps) <= set(SUPERSTEPS):
        raise ValueError(f"supersteps must be a non-empty subset of {SUPERSTEPS}, got {steps}")
    layout = prepare_run(cfg, root, steps=steps)
    t = time.perf_counter()
    if cfg.transport == "in-process":
        outcomes = _run_in_process(cfg, layout, steps)
    else:
        outcomes = _run_multi_process(cfg, layout, steps)
    status = 0 if all(o.ok for o in outcomes) else 1
    return PipelineResult(status, outcomes, layout, time.perf_counter() - t)


__all__ = [
    "MissingStageOutput",
    "PipelineError",
    "PipelineResult",
    "RankFailed",
    "SUPERSTEPS",
    "Worker",
    "prepare_run",
    "run_pipeline",
]
