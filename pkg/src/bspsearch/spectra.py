"""Experimental spectra: MS2 text parsing, preprocessing, batching and the
``.msb`` batch files consumed by the search superstep."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .chem import PROTON, ExperimentalSpectrum, SearchConfig

logger = logging.getLogger(__name__)

MSB_MAGIC = b"HMSB"
MSB_VERSION = 1
MSB_HEADER = struct.Struct("<4sHII")
MSB_SPECTRUM = struct.Struct("<IdBH")
PEAK_DTYPE = np.dtype([("mz", "<f4"), ("intensity", "<f4")])
DEFAULT_CHARGE = 2


class Ms2ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class ParseStats:
    missing_charge: int = 0
    dropped_empty: int = 0


def parse_ms2(data: bytes | str, first_id: int = 0, stats: ParseStats | None = None) -> list[ExperimentalSpectrum]:
    """Parse the pinned MS2 text format.

    ``H`` lines are headers, ``S <scan> <precursor_mz> <charge>`` opens a
    record and each following ``<mz> <intensity>`` line is a peak.  ``I``,
    ``Z`` and ``D`` lines written by common converters are skipped.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    stats = stats if stats is not None else ParseStats()
    spectra: list[ExperimentalSpectrum] = []
    current = None
    peaks_mz: list[float] = []
    peaks_int: list[float] = []

    def close():
        if current is not None:
            scan, mass, charge = current
            spectra.append(
                ExperimentalSpectrum(
                    spectrum_id=first_id + len(spectra),
                    precursor_mass=mass,
                    charge=charge,
                    mz=np.array(peaks_mz, dtype=np.float64),
                    intensity=np.array(peaks_int, dtype=np.float64),
                    scan=scan,
                )
            )

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        tag = line[0]
        if tag == "H" or tag in "IZD":
            continue
        if tag == "S":
            close()
            parts = line.split()
            try:
                scan = int(parts[1])
                mz = float(parts[2])
                if len(parts) >= 4:
                    charge = int(parts[3])
                else:
                    charge = DEFAULT_CHARGE
                    stats.missing_charge += 1
                    logger.warning("line %d: S record without charge, assuming %d", lineno, charge)
            except (IndexError, ValueError):
                raise Ms2ParseError(f"malformed S record {line!r}", lineno) from None
            if charge < 1 or not math.isfinite(mz) or len(parts) > 4:
                raise Ms2ParseError(f"malformed S record {line!r}", lineno)
            current = (scan, mz * charge - charge * PROTON, charge)
            peaks_mz, peaks_int = [], []
            continue
        if current is None:
            raise Ms2ParseError("peak line outside an S record", lineno)
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            mz, inten = float(parts[0]), float(parts[1])
        except ValueError:
            raise Ms2ParseError(f"malformed peak line {line!r}", lineno) from None
        if inten < 0 or not (math.isfinite(mz) and math.isfinite(inten)):
            raise Ms2ParseError(f"invalid peak values {line!r}", lineno)
        peaks_mz.append(mz)
        peaks_int.append(inten)
    close()
    return spectra


def read_ms2_files(paths: Sequence[str | os.PathLike], stats: ParseStats | None = None) -> list[ExperimentalSpectrum]:
    """Parse files in order; spectrum ids are global ordinals over (file, record)."""
    out: list[ExperimentalSpectrum] = []
    for path in paths:
        with open(path, "rb") as fh:
            out.extend(parse_ms2(fh.read(), first_id=len(out), stats=stats))
    return out


def identity_denoise(spectrum: ExperimentalSpectrum) -> ExperimentalSpectrum:
    return spectrum


def preprocess(
    spectrum: ExperimentalSpectrum,
    config: SearchConfig,
    denoise: Callable[[ExperimentalSpectrum], ExperimentalSpectrum] = identity_denoise,
) -> ExperimentalSpectrum | None:
    """Scale to max intensity 100, keep the ``top_b_peaks`` most intense peaks
    (ties to lower m/z) and re-sort by m/z.  Values are rounded to float32,
    the on-disk precision, so preprocessing is idempotent across a round trip.

    Returns ``None`` for a spectrum with no peaks.
    """
    spectrum = denoise(spectrum)
    if spectrum.peak_count == 0:
        return None
    mz = np.asarray(spectrum.mz, dtype=np.float64)
    inten = np.asarray(spectrum.intensity, dtype=np.float64)
    top = inten.max()
    if top > 0:
        inten = inten * (100.0 / top)
    order = np.lexsort((mz, -inten))[: config.top_b_peaks]
    keep = np.sort(order)
    mz, inten = mz[keep], inten[keep]
    by_mz = np.argsort(mz, kind="stable")
    return ExperimentalSpectrum(
        spectrum_id=spectrum.spectrum_id,
        precursor_mass=spectrum.precursor_mass,
        charge=spectrum.charge,
        mz=mz[by_mz].astype(np.float32),
        intensity=inten[by_mz].astype(np.float32),
        scan=spectrum.scan,
    )


@dataclass
class SpectrumBatch:
    tag: int
    spectra: list[ExperimentalSpectrum]
    source_file: str = ""

    @property
    def spectrum_ids(self) -> list[int]:
        return [s.spectrum_id for s in self.spectra]


def batch_size(total: int, partitions: int, batch_cap: int) -> int:
    return max(1, min(batch_cap, math.ceil(total / max(1, partitions))))


def make_batches(spectra: Sequence[ExperimentalSpectrum], partitions: int, batch_cap: int, source_file: str = "") -> list[SpectrumBatch]:
    """Order-preserving split into at most ``min(cap, ceil(n/P))``-sized batches.

    Batches have that fixed size (the last one takes the rest) unless this
    would give fewer than ``min(P, n)`` batches; then the spectra are split
    into exactly ``min(P, n)`` batches whose sizes differ by at most one.
    """
    n = len(spectra)
    if not n:
        return []
    size = batch_size(n, partitions, batch_cap)
    starts = list(range(0, n, size))
    want = min(max(1, partitions), n)
    if len(starts) < want:
        base, extra = divmod(n, want)
        starts = [i * base + min(i, extra) for i in range(want)]
    ends = starts[1:] + [n]
    return [SpectrumBatch(tag, list(spectra[a:b]), source_file) for tag, (a, b) in enumerate(zip(starts, ends))]


def encode_batch(batch: SpectrumBatch) -> bytes:
    parts = [MSB_HEADER.pack(MSB_MAGIC, MSB_VERSION, batch.tag, len(batch.spectra))]
    for s in batch.spectra:
        if s.peak_count > 0xFFFF:
            raise ValueError(f"spectrum {s.spectrum_id} has more than 65535 peaks")
        parts.append(MSB_SPECTRUM.pack(s.spectrum_id, s.precursor_mass, s.charge, s.peak_count))
        peaks = np.empty(s.peak_count, dtype=PEAK_DTYPE)
        peaks["mz"] = s.mz
        peaks["intensity"] = s.intensity
        parts.append(peaks.tobytes())
    return b"".join(parts)


def decode_batch(data: bytes, source_file: str = "") -> SpectrumBatch:
    magic, version, tag, count = MSB_HEADER.unpack_from(data)
    if magic != MSB_MAGIC:
        raise ValueError(f"bad batch magic {magic!r}")
    if version != MSB_VERSION:
        raise ValueError(f"unsupported batch version {version}")
    offset = MSB_HEADER.size
    spectra = []
    for _ in range(count):
        sid, mass, charge, npk = MSB_SPECTRUM.unpack_from(data, offset)
        offset += MSB_SPECTRUM.size
        peaks = np.frombuffer(data, dtype=PEAK_DTYPE, count=npk, offset=offset)
        offset += npk * PEAK_DTYPE.itemsize
        spectra.append(
            ExperimentalSpectrum(sid, mass, charge, peaks["mz"].copy(), peaks["intensity"].copy())
        )
    if offset != len(data):
        raise ValueError("trailing bytes after the last spectrum")
    return SpectrumBatch(tag, spectra, source_file)


def read_batch(path: str | os.PathLike) -> SpectrumBatch:
    with open(path, "rb") as fh:
        return decode_batch(fh.read(), str(path))


def batch_file_name(tag: int) -> str:
    return f"batch_{tag}.msb"


def _header_ok(path: Path, tag: int, count: int) -> bool:
    try:
        with open(path, "rb") as fh:
            head = fh.read(MSB_HEADER.size)
        magic, version, t, c = MSB_HEADER.unpack(head)
    except (OSError, struct.error):
        return False
    return magic == MSB_MAGIC and version == MSB_VERSION and t == tag and c == count


@dataclass(frozen=True)
class BatchDescriptor:
    tag: int
    path: str
    offset: int
    count: int
    spectrum_ids: tuple[int, ...] = ()
    scans: tuple[int, ...] = ()


class BatchIndex:
    """Pending descriptors plus the reclaim stack used by preempted loaders.

    A tag lives in exactly one of pending, reclaim or consumed.  Safe to use
    from several loader lanes.
    """

    def __init__(self, descriptors: Iterable[BatchDescriptor] = ()):
        self.descriptors = list(descriptors)
        self.pending = deque(self.descriptors)
        self.reclaim_stack: list[BatchDescriptor] = []
        self.consumed: list[int] = []
        self.writes = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.descriptors)

    def pop(self) -> BatchDescriptor | None:
        with self._lock:
            if self.reclaim_stack:
                return self.reclaim_stack.pop()
            if self.pending:
                return self.pending.popleft()
            return None

    def push_back(self, desc: BatchDescriptor) -> None:
        with self._lock:
            self.reclaim_stack.append(desc)

    def mark_consumed(self, desc: BatchDescriptor) -> None:
        with self._lock:
            self.consumed.append(desc.tag)

    def exhausted(self) -> bool:
        with self._lock:
            return not self.pending and not self.reclaim_stack

    def reset(self) -> None:
        with self._lock:
            self.pending = deque(self.descriptors)
            self.reclaim_stack = []
            self.consumed = []

    def by_tag(self) -> dict[int, BatchDescriptor]:
        return {d.tag: d for d in self.descriptors}

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": 1,
                "batches": [
                    {"tag": d.tag, "path": d.path, "offset": d.offset, "count": d.count,
                     "spectrum_ids": list(d.spectrum_ids), "scans": list(d.scans)}
                    for d in self.descriptors
                ],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "BatchIndex":
        doc = json.loads(text)
        return cls(
            BatchDescriptor(
                b["tag"], b["path"], b["offset"], b["count"], tuple(b["spectrum_ids"]), tuple(b.get("scans", ()))
            )
            for b in doc["batches"]
        )


INDEX_FILE = "index.json"


def describe_batches(batches: Sequence[SpectrumBatch], out_dir: str | os.PathLike) -> BatchIndex:
    out = Path(out_dir)
    return BatchIndex(
        BatchDescriptor(
            b.tag, str(out / batch_file_name(b.tag)), MSB_HEADER.size, len(b.spectra),
            tuple(b.spectrum_ids), tuple(s.scan for s in b.spectra),
        )
        for b in batches
    )


def write_preprocessed(
    batches: Sequence[SpectrumBatch],
    out_dir: str | os.PathLike,
    owned: Callable[[int], bool] = lambda tag: True,
    prepare: Callable[[SpectrumBatch], SpectrumBatch] | None = None,
    write_index: bool = True,
) -> BatchIndex:
    """Write one ``batch_<tag>.msb`` per owned batch and persist the index.

    Existing files with a valid header are kept, so a repeated run does no
    batch writes; ``prepare`` (e.g. preprocessing) only runs for batches that
    are actually written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = describe_batches(batches, out)
    for batch, desc in zip(batches, index.descriptors):
        if not owned(batch.tag):
            continue
        path = Path(desc.path)
        if _header_ok(path, batch.tag, len(batch.spectra)):
            continue
        data = encode_batch(prepare(batch) if prepare else batch)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
        index.writes += 1
    if write_index:
        tmp = out / (INDEX_FILE + ".tmp")
        tmp.write_text(index.to_json())
        os.replace(tmp, out / INDEX_FILE)
    return index


def load_index(out_dir: str | os.PathLike) -> BatchIndex:
    return BatchIndex.from_json((Path(out_dir) / INDEX_FILE).read_text())


def preprocess_batch(batch: SpectrumBatch, config: SearchConfig) -> SpectrumBatch:
    spectra = [preprocess(s, config) for s in batch.spectra]
    if any(s is None for s in spectra):
        raise ValueError("batches must be built from spectra with at least one peak")
    return SpectrumBatch(batch.tag, spectra, batch.source_file)


def drop_empty(spectra: Iterable[ExperimentalSpectrum], stats: ParseStats | None = None) -> list[ExperimentalSpectrum]:
    kept = []
    for s in spectra:
        if s.peak_count == 0:
            if stats is not None:
                stats.dropped_empty += 1
            continue
        kept.append(s)
    return kept
