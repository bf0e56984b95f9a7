"""Per-query partial results: score histograms, window sampling and the
fixed 256-byte wire record written by the result serializer."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

WIRE_SAMPLES = 120
HISTOGRAM_BINS = 1024
U16_MAX = np.iinfo(np.uint16).max

FLAG_EMPTY = 1
FLAG_SATURATED = 2
FLAG_LOCAL_HEAP = 4
FLAG_FULL_HISTOGRAM = 8

RECORD_DTYPE = np.dtype(
    [
        ("entry_id", "<u4"),
        ("hyperscore", "<f4"),
        ("candidate_count", "<u4"),
        ("hist_start_bin", "<u2"),
        ("sample_len", "u1"),
        ("flags", "u1"),
        ("samples", "<u2", (WIRE_SAMPLES,)),
    ]
)
RECORD_SIZE = RECORD_DTYPE.itemsize
assert RECORD_SIZE == 256

HRB_MAGIC = b"HRES"
HRB_HEADER = struct.Struct("<4sIII")
NO_ENTRY = 0xFFFFFFFF


class ResultFormatError(ValueError):
    pass


class ScoreHistogram:
    """1024 ``u32`` bins; bin ``b`` holds scores in ``[b*width, (b+1)*width)``."""

    def __init__(self, bins: int = HISTOGRAM_BINS, width: float = 0.1, counts: np.ndarray | None = None):
        self.width = width
        self.bins = np.zeros(bins, dtype=np.uint32) if counts is None else np.asarray(counts, dtype=np.uint32)

    def add(self, scores: np.ndarray) -> None:
        idx = np.clip(np.floor(np.asarray(scores, dtype=np.float64) / self.width), 0, len(self.bins) - 1)
        self.bins += np.bincount(idx.astype(np.int64), minlength=len(self.bins)).astype(np.uint32)

    @property
    def total(self) -> int:
        return int(self.bins.sum(dtype=np.int64))


def sample_distribution(histogram: ScoreHistogram | np.ndarray, s: int = WIRE_SAMPLES) -> tuple[int, np.ndarray, int]:
    """Keep an ``s``-bin window of the distribution.

    When every nonzero bin fits, the window is centered on the mean location
    of the (up to) three most populated bins and shifted just enough to keep
    all of them.  Otherwise it starts at the lowest nonzero bin, so only the
    high-score tail is dropped and the window keeps its full length ``s``.
    Returns ``(start_bin, samples, flags)``; in the lossless case ``samples``
    ends at the last nonzero bin.  Counts clamp to ``u16``.
    """
    bins = np.asarray(histogram.bins if isinstance(histogram, ScoreHistogram) else histogram)
    n = len(bins)
    nz = np.flatnonzero(bins)
    if len(nz) == 0:
        return 0, np.zeros(0, dtype=np.uint16), FLAG_EMPTY
    lo, hi = int(nz[0]), int(nz[-1])
    if hi - lo + 1 <= s:
        # stable sort keeps the lowest index first among equal counts
        top = np.argsort(-bins.astype(np.int64), kind="stable")[: min(3, len(nz))]
        mean_bin = int(np.floor(top.mean() + 0.5))
        start = min(max(mean_bin - s // 2, hi - s + 1), lo)
        start = int(np.clip(start, 0, n - s))
        window = bins[start : hi + 1]
    else:
        start = lo
        window = bins[start : start + s]
    flags = 0
    if window.max(initial=0) > U16_MAX:
        flags |= FLAG_SATURATED
    return start, np.minimum(window, U16_MAX).astype(np.uint16), flags


def desample(start: int, samples: np.ndarray, bins: int = HISTOGRAM_BINS) -> np.ndarray:
    """Place a sampled window back at its offset in a full-length array."""
    out = np.zeros(bins, dtype=np.uint64)
    out[start : start + len(samples)] = samples
    return out


@dataclass
class PartialResult:
    query_id: int
    entry_id: int = NO_ENTRY
    hyperscore: float = 0.0
    candidate_count: int = 0
    hist_start_bin: int = 0
    sample_len: int = 0
    flags: int = FLAG_EMPTY
    samples: np.ndarray = field(default_factory=lambda: np.zeros(WIRE_SAMPLES, dtype=np.uint16))
    full_histogram: np.ndarray | None = None

    @property
    def empty(self) -> bool:
        return bool(self.flags & FLAG_EMPTY)

    @property
    def g_max(self) -> float:
        return self.hyperscore

    def distribution(self, bins: int = HISTOGRAM_BINS) -> np.ndarray:
        """This worker's contribution to the assembled histogram (``u64``)."""
        if self.empty:
            return np.zeros(bins, dtype=np.uint64)
        if self.flags & FLAG_FULL_HISTOGRAM:
            return np.asarray(self.full_histogram, dtype=np.uint64)
        return desample(self.hist_start_bin, self.samples[: self.sample_len], bins)

    def complete_until(self, bins: int = HISTOGRAM_BINS) -> int:
        """First bin at which this record may be missing pruned counts."""
        if self.empty or self.flags & FLAG_FULL_HISTOGRAM:
            return bins
        if int(self.samples[: self.sample_len].sum(dtype=np.int64)) >= self.candidate_count:
            return bins
        return self.hist_start_bin + self.sample_len

    def __eq__(self, other) -> bool:
        if not isinstance(other, PartialResult):
            return NotImplemented
        same_hist = (self.full_histogram is None) == (other.full_histogram is None) and (
            self.full_histogram is None or np.array_equal(self.full_histogram, other.full_histogram)
        )
        return (
            self.query_id == other.query_id
            and self.entry_id == other.entry_id
            and np.float32(self.hyperscore) == np.float32(other.hyperscore)
            and self.candidate_count == other.candidate_count
            and self.hist_start_bin == other.hist_start_bin
            and self.sample_len == other.sample_len
            and self.flags == other.flags
            and np.array_equal(self.samples, other.samples)
            and same_hist
        )


def encode_records(results: Sequence[PartialResult]) -> bytes:
    """Pack results into consecutive 256-byte records (query ids are implied
    by position within the batch and are not stored)."""
    rec = np.zeros(len(results), dtype=RECORD_DTYPE)
    for i, r in enumerate(results):
        if r.sample_len > WIRE_SAMPLES or len(r.samples) > WIRE_SAMPLES:
            raise ResultFormatError(f"at most {WIRE_SAMPLES} samples fit in a record")
        rec[i]["entry_id"] = r.entry_id
        rec[i]["hyperscore"] = r.hyperscore
        rec[i]["candidate_count"] = r.candidate_count
        rec[i]["hist_start_bin"] = r.hist_start_bin
        rec[i]["sample_len"] = r.sample_len
        rec[i]["flags"] = r.flags
        rec[i]["samples"][: len(r.samples)] = r.samples
    return rec.tobytes()


def decode_records(data: bytes, query_ids: Sequence[int]) -> list[PartialResult]:
    if len(data) != RECORD_SIZE * len(query_ids):
        raise ResultFormatError(f"expected {len(query_ids)} records, got {len(data)} bytes")
    rec = np.frombuffer(data, dtype=RECORD_DTYPE)
    return [
        PartialResult(
            query_id=int(q),
            entry_id=int(r["entry_id"]),
            hyperscore=float(r["hyperscore"]),
            candidate_count=int(r["candidate_count"]),
            hist_start_bin=int(r["hist_start_bin"]),
            sample_len=int(r["sample_len"]),
            flags=int(r["flags"]),
            samples=r["samples"].copy(),
        )
        for q, r in zip(query_ids, rec)
    ]


def result_file_name(tag: int, rank: int) -> str:
    return f"res_{tag}_{rank}.hrb"


def encode_result_file(tag: int, rank: int, results: Sequence[PartialResult]) -> bytes:
    """Header, the 256-byte records and, for results carrying a full
    histogram, a trailing appendix of 1024 ``u32`` bins per record."""
    parts = [HRB_HEADER.pack(HRB_MAGIC, tag, rank, len(results)), encode_records(results)]
    full = [r.full_histogram for r in results if r.flags & FLAG_FULL_HISTOGRAM]
    if full:
        if len(full) != len(results):
            raise ResultFormatError("full histograms must be present for all or none of a batch")
        parts.append(np.ascontiguousarray(np.stack(full), dtype="<u4").tobytes())
    return b"".join(parts)


def decode_result_file(data: bytes, query_ids: Sequence[int]) -> tuple[int, int, list[PartialResult]]:
    try:
        magic, tag, rank, count = HRB_HEADER.unpack_from(data)
    except struct.error:
        raise ResultFormatError("truncated result header") from None
    if magic != HRB_MAGIC:
        raise ResultFormatError(f"bad result magic {magic!r}")
    if count != len(query_ids):
        raise ResultFormatError(f"result count {count} does not match batch size {len(query_ids)}")
    body_end = HRB_HEADER.size + count * RECORD_SIZE
    results = decode_records(data[HRB_HEADER.size : body_end], query_ids)
    rest = data[body_end:]
    if results and results[0].flags & FLAG_FULL_HISTOGRAM:
        want = count * HISTOGRAM_BINS * 4
        if len(rest) != want:
            raise ResultFormatError(f"histogram appendix has {len(rest)} bytes, expected {want}")
        hist = np.frombuffer(rest, dtype="<u4").reshape(count, HISTOGRAM_BINS)
        for r, h in zip(results, hist):
            r.full_histogram = h.astype(np.uint32)
    elif rest:
        raise ResultFormatError(f"{len(rest)} trailing bytes after records")
    return tag, rank, results


def write_result_file(out_dir: str | os.PathLike, tag: int, rank: int, results: Sequence[PartialResult]) -> Path:
    path = Path(out_dir) / result_file_name(tag, rank)
    data = encode_result_file(tag, rank, results)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def read_result_file(path: str | os.PathLike, query_ids: Sequence[int]) -> tuple[int, int, list[PartialResult]]:
    return decode_result_file(Path(path).read_bytes(), query_ids)


def heap_file_name(tag: int, rank: int) -> str:
    return f"heap_{tag}_{rank}.npz"


def write_heaps(out_dir: str | os.PathLike, tag: int, rank: int, entry_ids: np.ndarray, scores: np.ndarray) -> Path:
    """Persist a batch's worker-local top-M lists (``NO_ENTRY`` padded)."""
    path = Path(out_dir) / heap_file_name(tag, rank)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, entry_ids=entry_ids.astype(np.uint32), scores=scores.astype(np.float32))
    os.replace(tmp, path)
    return path


def read_heaps(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as z:
        return z["entry_ids"], z["scores"]
