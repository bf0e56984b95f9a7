"""Result assembly: merge per-worker score distributions, fit the null tail,
compute e-values and write peptide-spectrum matches."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import savgol_filter

from .search.results import HISTOGRAM_BINS, NO_ENTRY, PartialResult

EULER_GAMMA = 0.5772156649015329
ROUTED = struct.Struct("<IffI")
ROUTED_DTYPE = np.dtype([("query_id", "<u4"), ("e_value", "<f4"), ("g_max", "<f4"), ("candidate_total", "<u4")])
assert ROUTED.size == ROUTED_DTYPE.itemsize == 16

PSM_FLAG_NO_FIT = 1
PSM_COLUMNS = (
    "spectrum_id", "scan", "peptide", "mods", "calc_mass", "precursor_mass", "charge",
    "hyperscore", "e_value", "candidate_total", "origin_rank", "flags",
)


class AssemblyError(RuntimeError):
    """Inconsistent or missing superstep-3 output."""


def claim_tags(tags: Iterable[int], rank: int, partitions: int) -> set[int]:
    return {int(t) for t in tags if int(t) % partitions == rank}


@dataclass
class AssembledDistribution:
    query_id: int
    bins: np.ndarray
    total_n: int
    g_max_global: float
    origin_rank: int
    entry_id: int = NO_ENTRY
    complete_until: int = HISTOGRAM_BINS

    @property
    def empty(self) -> bool:
        return self.total_n == 0


def assemble(records: Sequence[tuple[int, PartialResult]], bins: int = HISTOGRAM_BINS) -> AssembledDistribution:
    """Sum ``(rank, record)`` contributions for one query.

    Sampled windows are shifted back to their start bin before addition.  The
    origin is the rank holding the best hit by (score desc, entry id asc).
    """
    if not records:
        raise AssemblyError("no records to assemble")
    qids = {r.query_id for _, r in records}
    if len(qids) != 1:
        raise AssemblyError(f"records for different queries: {sorted(qids)}")
    ranks = [rank for rank, _ in records]
    if len(set(ranks)) != len(ranks):
        raise AssemblyError(f"duplicate record for query {qids.pop()} from ranks {ranks}")
    total = np.zeros(bins, dtype=np.uint64)
    total_n = 0
    complete = bins
    best: tuple | None = None
    for rank, r in records:
        if r.empty:
            continue
        total += r.distribution(bins)
        complete = min(complete, r.complete_until(bins))
        total_n += r.candidate_count
        key = (-float(np.float32(r.hyperscore)), r.entry_id)
        if best is None or key < best[0]:
            best = (key, rank, r)
    qid = records[0][1].query_id
    if best is None:
        return AssembledDistribution(qid, total, 0, 0.0, -1)
    _, rank, r = best
    return AssembledDistribution(qid, total, total_n, float(np.float32(r.hyperscore)), rank, r.entry_id, complete)


def savitzky_golay(bins: np.ndarray, window: int = 9, poly_order: int = 3) -> np.ndarray:
    """Savitzky-Golay smoothing; the first and last half-windows take the
    value of the polynomial fitted to the edge window, so polynomials of
    degree <= ``poly_order`` pass through unchanged.  Negatives clamp to zero."""
    if window % 2 == 0 or poly_order >= window:
        raise ValueError("window must be odd and larger than poly_order")
    y = np.asarray(bins, dtype=np.float64)
    if len(y) < window:
        return y.copy()
    return np.maximum(savgol_filter(y, window, poly_order, mode="interp"), 0.0)


@dataclass(frozen=True)
class TailFit:
    """``log10(survival count) ~ w * score + b``; ``log10_base`` is log10 of
    the total count, so ``b - log10_base`` is the probability intercept."""

    w: float
    b: float
    log10_base: float
    points: int
    method: str = "tail"

    def log10_survival(self, score: float) -> float:
        return min(0.0, self.w * score + self.b - self.log10_base)


@dataclass(frozen=True)
class GumbelFit:
    mu: float
    beta_scale: float

    def survival(self, x: float) -> float:
        return -math.expm1(-math.exp(-(x - self.mu) / self.beta_scale))

    def as_tail_fit(self, x: float, base: float = 1.0) -> TailFit:
        """Tangent line of log10 survival at ``x`` expressed as a :class:`TailFit`."""
        z = math.exp(-(x - self.mu) / self.beta_scale)
        s = self.survival(x)
        log_s = math.log10(s) if s > 0 else -z / math.log(10)
        # d/dx log10 S = -(z / beta) * exp(-z) / (S ln 10)
        if s > 0:
            slope = -(z / self.beta_scale) * math.exp(-z) / (s * math.log(10))
        else:
            slope = -1.0 / (self.beta_scale * math.log(10))
        log_base = math.log10(base)
        return TailFit(slope, log_s - slope * x + log_base, log_base, 0, "gumbel")


def mode_bin(smoothed: np.ndarray) -> int:
    return int(np.argmax(smoothed))


def survival_counts(smoothed: np.ndarray, total: float | None = None) -> np.ndarray:
    """``S[b]``: count at or above bin ``b``, as ``total`` minus the mass below ``b``."""
    y = np.asarray(smoothed, dtype=np.float64)
    below = np.concatenate([[0.0], np.cumsum(y)[:-1]])
    if total is None:
        return np.cumsum(y[::-1])[::-1]
    return total - below


def tail_fit(
    smoothed: np.ndarray,
    bin_width: float,
    total: float | None = None,
    complete_until: int | None = None,
    min_survival: float = 1.0,
) -> TailFit | None:
    """Least-squares line through log10 survival for bins above the mode.

    ``total`` is the full count when some high bins were pruned (default: the
    sum of ``smoothed``); only bins below ``complete_until`` are used.  Raising
    ``min_survival`` drops the sparse far tail from the fit.  Returns ``None``
    when fewer than three points qualify.
    """
    y = np.asarray(smoothed, dtype=np.float64)
    if len(y) == 0 or not y.sum() > 0:
        return None
    surv = survival_counts(y, total)
    end = len(y) if complete_until is None else max(0, min(len(y), complete_until))
    m = mode_bin(y[:end]) if end else 0
    idx = np.arange(m + 1, end)
    idx = idx[surv[idx] >= max(1.0, min_survival)]
    if len(idx) < 3:
        return None
    x = idx * bin_width
    ly = np.log10(surv[idx])
    A = np.column_stack([x, np.ones_like(x)])
    (w, b), *_ = np.linalg.lstsq(A, ly, rcond=None)
    return TailFit(float(w), float(b), float(np.log10(surv[0])), len(idx))


def gumbel_fit(smoothed: np.ndarray, bin_width: float, min_mass: float = 100.0) -> GumbelFit | None:
    """Method-of-moments Gumbel estimate from bin centers."""
    y = np.asarray(smoothed, dtype=np.float64)
    mass = y.sum()
    if not mass >= min_mass:
        return None
    centers = (np.arange(len(y)) + 0.5) * bin_width
    mean = float((y * centers).sum() / mass)
    var = float((y * (centers - mean) ** 2).sum() / mass)
    if not var > 0:
        return None
    beta = math.sqrt(var) * math.sqrt(6) / math.pi
    return GumbelFit(mean - EULER_GAMMA * beta, beta)


def expect_value(fit: TailFit | GumbelFit | None, g_max: float, total_n: int) -> float:
    """Expected number of chance hits at least as good as ``g_max``; NaN
    when no fit is available."""
    if fit is None:
        return math.nan
    if isinstance(fit, GumbelFit):
        return fit.survival(g_max) * total_n
    return 10.0 ** fit.log10_survival(g_max) * total_n


def null_bins(dist: AssembledDistribution, bin_width: float) -> np.ndarray:
    """Assembled counts with the top hit taken out, as the null distribution."""
    bins = dist.bins.astype(np.float64)
    if dist.total_n:
        b = min(len(bins) - 1, max(0, int(math.floor(dist.g_max_global / bin_width))))
        if bins[b] > 0:
            bins[b] -= 1
    return bins


@dataclass
class QueryEvalue:
    query_id: int
    e_value: float
    g_max: float
    candidate_total: int
    origin_rank: int
    entry_id: int = NO_ENTRY
    tail: TailFit | None = None
    gumbel: GumbelFit | None = None


def score_query(
    dist: AssembledDistribution,
    bin_width: float,
    fit: str = "tail",
    verbose: bool = False,
    window: int = 9,
    min_survival: float = 1.0,
) -> QueryEvalue:
    """Smooth the null distribution, fit it and compute the e-value of the top hit.

    Survival is the candidate total (less the top hit) minus the mass below
    each bin, which stays exact under tail pruning; the fit only uses bins
    far enough below the first possibly-pruned bin that smoothing is unaffected.
    """
    smoothed = savitzky_golay(null_bins(dist, bin_width), window)
    tail = gumbel = None
    if fit == "tail" or verbose:
        usable = dist.complete_until if dist.complete_until >= len(smoothed) else dist.complete_until - window // 2
        tail = tail_fit(
            smoothed, bin_width, total=max(0, dist.total_n - 1), complete_until=usable, min_survival=min_survival
        )
    if fit == "gumbel" or verbose:
        gumbel = gumbel_fit(smoothed, bin_width)
    if fit not in ("tail", "gumbel"):
        raise ValueError(f"unknown fit method {fit!r}")
    chosen = tail if fit == "tail" else gumbel
    ev = expect_value(chosen, dist.g_max_global, dist.total_n)
    return QueryEvalue(dist.query_id, ev, dist.g_max_global, dist.total_n, dist.origin_rank, dist.entry_id, tail, gumbel)


def encode_routed(records: Sequence[QueryEvalue]) -> bytes:
    arr = np.zeros(len(records), dtype=ROUTED_DTYPE)
    for i, r in enumerate(records):
        arr[i] = (r.query_id, r.e_value, r.g_max, r.candidate_total)
    return arr.tobytes()


def decode_routed(data: bytes) -> np.ndarray:
    if len(data) % ROUTED_DTYPE.itemsize:
        raise AssemblyError(f"routed message of {len(data)} bytes is not a whole number of records")
    return np.frombuffer(data, dtype=ROUTED_DTYPE).copy()


def group_by_origin(results: Iterable[QueryEvalue], partitions: int) -> dict[int, list[QueryEvalue]]:
    out: dict[int, list[QueryEvalue]] = {r: [] for r in range(partitions)}
    for q in results:
        if q.candidate_total > 0:
            out[q.origin_rank].append(q)
    return out


@dataclass(frozen=True)
class Psm:
    spectrum_id: int
    scan: int
    peptide: str
    mods: str
    calc_mass: float
    precursor_mass: float
    charge: int
    hyperscore: float
    e_value: float
    candidate_total: int
    origin_rank: int
    flags: int = 0

    def row(self) -> str:
        ev = "nan" if math.isnan(self.e_value) else f"{self.e_value:.6e}"
        return "\t".join(
            [
                str(self.spectrum_id), str(self.scan), self.peptide, self.mods,
                f"{self.calc_mass:.5f}", f"{self.precursor_mass:.5f}", str(self.charge),
                f"{self.hyperscore:.6f}", ev, str(self.candidate_total), str(self.origin_rank), str(self.flags),
            ]
        )


def psm_file_name(rank: int) -> str:
    return f"psms_{rank}.tsv"


def write_psms(path: str | os.PathLike, psms: Iterable[Psm]) -> Path:
    path = Path(path)
    rows = sorted(psms, key=lambda p: p.spectrum_id)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        fh.write("\t".join(PSM_COLUMNS) + "\n")
        for p in rows:
            fh.write(p.row() + "\n")
    os.replace(tmp, path)
    return path


def read_psm_rows(path: str | os.PathLike) -> list[dict[str, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


def merge_psm_files(paths: Sequence[str | os.PathLike], out: str | os.PathLike) -> int:
    """Concatenate per-rank PSM files sorted by spectrum id."""
    rows = []
    for p in paths:
        lines = Path(p).read_text().splitlines()
        rows += [line for line in lines[1:] if line]
    rows.sort(key=lambda line: int(line.split("\t", 1)[0]))
    with open(out, "w") as fh:
        fh.write("\t".join(PSM_COLUMNS) + "\n")
        for line in rows:
            fh.write(line + "\n")
    return len(rows)
