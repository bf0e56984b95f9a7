"""Partial database construction: digestion, PTM variants, load-balanced
partitioning and the per-worker fragment-ion index.

Entries are kept columnar (numpy) because a desk-scale database already holds
a few hundred thousand variants; :class:`PeptideEntry` is the row view.
"""

from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .chem import (
    PROTON,
    RESIDUE_MASSES,
    RESIDUE_TABLE,
    WATER,
    DatabaseConfig,
    InvalidInputError,
    PeptideEntry,
    PtmSpec,
    TheoreticalSpectrum,
    describe_mods,
    peptide_mass,
)

MANIFEST_MAGIC = b"HCP1"
MANIFEST_HEADER = struct.Struct("<4sIII")
MANIFEST_RECORD = np.dtype(
    [("global_id", "<u4"), ("base_id", "<u4"), ("mod_mask", "<u8"), ("precursor_mass", "<f8")]
)


class FastaError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def parse_fasta(text: str) -> list[tuple[str, str]]:
    """Return ``(description, sequence)`` pairs; sequences uppercased, ``*`` stripped."""
    proteins: list[tuple[str, str]] = []
    desc = None
    chunks: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            if desc is not None:
                proteins.append((desc, "".join(chunks)))
            desc = line[1:].strip()
            chunks = []
            continue
        if desc is None:
            raise FastaError("sequence data before the first '>' header", lineno)
        seq = line.upper().replace("*", "")
        if not seq.isalpha():
            raise FastaError(f"invalid characters in sequence line {line!r}", lineno)
        chunks.append(seq)
    if desc is not None:
        proteins.append((desc, "".join(chunks)))
    return proteins


def read_fasta(path: str | os.PathLike) -> list[tuple[str, str]]:
    with open(path, encoding="utf-8") as fh:
        return parse_fasta(fh.read())


def cleavage_sites(sequence: str) -> list[int]:
    """End offsets (exclusive) of tryptic pieces: after K/R unless followed by P."""
    ends = []
    n = len(sequence)
    for i, aa in enumerate(sequence):
        if aa in "KR" and (i + 1 == n or sequence[i + 1] != "P"):
            ends.append(i + 1)
    if not ends or ends[-1] != n:
        ends.append(n)
    return ends


def _fixed_mass(sequence: str, fixed: dict[str, float]) -> float:
    return peptide_mass(sequence) + sum(fixed.get(aa, 0.0) for aa in sequence)


def digest(proteins: Iterable[tuple[str, str] | str], config: DatabaseConfig) -> list[str]:
    """Unique tryptic peptides, ordered by (fixed-mod mass, sequence).

    The ordering is what makes base ids cluster near-identical precursor
    masses next to each other before the round-robin scatter.
    """
    lo_len, hi_len = config.len_range
    lo_mass, hi_mass = config.mass_range
    fixed = {p.target_residue: p.delta_mass for p in config.ptms if p.is_fixed}
    seen: dict[str, float] = {}
    for protein in proteins:
        seq = protein[1] if isinstance(protein, tuple) else protein
        ends = cleavage_sites(seq)
        starts = [0] + ends[:-1]
        for a in range(len(starts)):
            for b in range(a, min(a + config.missed_cleavages + 1, len(ends))):
                pep = seq[starts[a]:ends[b]]
                if not lo_len <= len(pep) <= hi_len or pep in seen:
                    continue
                if any(aa not in RESIDUE_MASSES for aa in pep):
                    continue
                mass = _fixed_mass(pep, fixed)
                if lo_mass <= mass <= hi_mass:
                    seen[pep] = mass
    return sorted(seen, key=lambda s: (seen[s], s))


@dataclass
class EntryTable:
    """Columnar peptide entries; ``global_id`` is the canonical ordinal."""

    base_id: np.ndarray
    mod_mask: np.ndarray
    precursor_mass: np.ndarray
    global_id: np.ndarray

    def __len__(self) -> int:
        return len(self.base_id)

    def __iter__(self) -> Iterator[PeptideEntry]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> PeptideEntry:
        return PeptideEntry(int(self.base_id[i]), int(self.mod_mask[i]), float(self.precursor_mass[i]))

    def take(self, rows: np.ndarray) -> "EntryTable":
        return EntryTable(self.base_id[rows], self.mod_mask[rows], self.precursor_mass[rows], self.global_id[rows])

    @classmethod
    def from_entries(cls, entries: Sequence[PeptideEntry]) -> "EntryTable":
        return cls(
            np.array([e.base_id for e in entries], dtype=np.uint32),
            np.array([e.mod_mask for e in entries], dtype=np.uint64),
            np.array([e.precursor_mass for e in entries], dtype=np.float64),
            np.arange(len(entries), dtype=np.uint32),
        )


def expand_variants(bases: Sequence[str], config: DatabaseConfig) -> EntryTable:
    """Every variable-PTM placement subset with popcount <= the cap, per base peptide.

    Fixed PTMs are always applied; variants leaving the mass range are dropped.
    Rows come out in base order, unmodified variant first.
    """
    fixed = {p.target_residue: p.delta_mass for p in config.ptms if p.is_fixed}
    variable = {p.target_residue: p.delta_mass for p in config.ptms if not p.is_fixed}
    lo_mass, hi_mass = config.mass_range
    cap = config.max_mods_per_peptide
    base_ids: list[int] = []
    masks: list[int] = []
    masses: list[float] = []
    for bid, seq in enumerate(bases):
        if len(seq) > 64:
            raise InvalidInputError("peptides longer than 64 residues do not fit a 64-bit mod mask")
        base_mass = _fixed_mass(seq, fixed)
        sites = [i for i, aa in enumerate(seq) if aa in variable]
        for k in range(min(cap, len(sites)) + 1):
            for combo in itertools.combinations(sites, k):
                mass = base_mass + sum(variable[seq[i]] for i in combo)
                if not lo_mass <= mass <= hi_mass:
                    continue
                mask = 0
                for i in combo:
                    mask |= 1 << i
                base_ids.append(bid)
                masks.append(mask)
                masses.append(mass)
    return EntryTable(
        np.array(base_ids, dtype=np.uint32),
        np.array(masks, dtype=np.uint64),
        np.array(masses, dtype=np.float64),
        np.arange(len(base_ids), dtype=np.uint32),
    )


def mod_distance(mask_x: int, mask_y: int, len_x: int, len_y: int | None = None) -> float:
    """Mod Distance between two modification variants of comparable sequences.

    ``a`` is the unedited prefix plus unedited suffix length, where a position
    counts as edited when it is modified in exactly one of the two entries.
    """
    length = max(len_x, len_x if len_y is None else len_y)
    if length == 0:
        return 0.0
    diff = int(mask_x) ^ int(mask_y)
    if diff == 0:
        return 0.0
    prefix = (diff & -diff).bit_length() - 1
    suffix = length - diff.bit_length()
    return 2.0 - (prefix + suffix) / length


def _mod_distance_from_unmodified(masks: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    out = np.zeros(len(masks), dtype=np.float64)
    for i, (m, n) in enumerate(zip(masks.tolist(), lengths.tolist())):
        if m:
            out[i] = mod_distance(m, 0, n)
    return out


def canonical_order(entries: EntryTable, base_lengths: np.ndarray) -> EntryTable:
    """Group by base id, order each group by Mod Distance from the unmodified
    entry (ties by mask value) and renumber ``global_id`` densely."""
    dist = _mod_distance_from_unmodified(entries.mod_mask, base_lengths[entries.base_id])
    order = np.lexsort((entries.mod_mask, dist, entries.base_id))
    out = entries.take(order)
    out.global_id = np.arange(len(out), dtype=np.uint32)
    return out


def partition(
    entries: EntryTable,
    partitions: int,
    base_lengths: np.ndarray,
    scatter: str = "round_robin",
    seed: int = 0,
) -> list[EntryTable]:
    """Scatter the canonical entry order across workers.

    ``round_robin`` sends ordinal ``i`` to worker ``i % P``; ``random`` applies
    a seeded permutation of the ordinals first (still exactly balanced).
    """
    if partitions < 1:
        raise InvalidInputError("partitions must be >= 1")
    canon = canonical_order(entries, base_lengths)
    owners = owner_of(len(canon), partitions, scatter, seed)
    return [canon.take(np.flatnonzero(owners == p)) for p in range(partitions)]


def owner_of(n: int, partitions: int, scatter: str = "round_robin", seed: int = 0) -> np.ndarray:
    ordinals = np.arange(n, dtype=np.int64)
    if scatter == "random":
        ordinals = np.random.default_rng(seed).permutation(n)
    elif scatter != "round_robin":
        raise InvalidInputError(f"unknown scatter mode {scatter!r}")
    return ordinals % partitions


@dataclass
class PeptideDatabase:
    """The full (every-worker) entry stream in canonical order."""

    bases: list[str]
    entries: EntryTable
    ptms: tuple[PtmSpec, ...]

    @property
    def base_lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.bases], dtype=np.int64)

    def sequence(self, global_id: int) -> str:
        return self.bases[int(self.entries.base_id[global_id])]


def generate_database(proteins: Iterable[tuple[str, str] | str], config: DatabaseConfig) -> PeptideDatabase:
    bases = digest(proteins, config)
    raw = expand_variants(bases, config)
    lengths = np.array([len(s) for s in bases], dtype=np.int64)
    return PeptideDatabase(bases, canonical_order(raw, lengths), tuple(config.ptms))


def local_share(db: PeptideDatabase, rank: int, partitions: int, scatter: str = "round_robin", seed: int = 0) -> EntryTable:
    """The ``is_mine`` filter: rows of the canonical stream owned by ``rank``."""
    owners = owner_of(len(db.entries), partitions, scatter, seed)
    return db.entries.take(np.flatnonzero(owners == rank))


@dataclass
class FragmentIonIndex:
    """Partition-local index: spectra ordered by precursor mass plus a
    globally sorted fragment array whose owners index that order."""

    precursor_mass: np.ndarray
    global_id: np.ndarray
    base_id: np.ndarray
    mod_mask: np.ndarray
    frag_mz: np.ndarray
    frag_owner: np.ndarray
    frag_kind: np.ndarray
    bases: Sequence[str]
    ptms: tuple[PtmSpec, ...]

    @property
    def local_size(self) -> int:
        return len(self.precursor_mass)

    def sequence(self, local: int) -> str:
        return self.bases[int(self.base_id[local])]

    def entry(self, local: int) -> PeptideEntry:
        return PeptideEntry(int(self.base_id[local]), int(self.mod_mask[local]), float(self.precursor_mass[local]))

    def spectrum(self, local: int) -> TheoreticalSpectrum:
        frags = np.sort(self.frag_mz[self.frag_owner == local])
        return TheoreticalSpectrum(self.entry(local), tuple(frags.tolist()))

    def mods(self, local: int) -> str:
        return describe_mods(self.sequence(local), int(self.mod_mask[local]), self.ptms)


def _position_tables(ptms: Sequence[PtmSpec]) -> tuple[np.ndarray, np.ndarray]:
    fixed = np.zeros(256)
    variable = np.zeros(256)
    for p in ptms:
        (fixed if p.is_fixed else variable)[ord(p.target_residue)] = p.delta_mass
    return fixed, variable


def theoretical_fragments(
    bases: Sequence[str], base_id: np.ndarray, mod_mask: np.ndarray, ptms: Sequence[PtmSpec], chunk: int = 20_000
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """b/y fragments for many entries at once: ``(mz, row, kind)`` arrays.

    Each row's prefix sums are accumulated independently so values are
    bit-identical to :func:`bspsearch.chem.fragment_ions` for that peptide.
    """
    fixed_t, var_t = _position_tables(ptms)
    out_mz, out_row, out_kind = [], [], []
    n = len(base_id)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        seqs = [bases[int(b)] for b in base_id[rows]]
        lengths = np.array([len(s) for s in seqs])
        if len(rows) == 0:
            continue
        if lengths.min() < 2:
            raise InvalidInputError("fragment ions need a peptide of length >= 2")
        width = int(lengths.max())
        codes = np.zeros((len(rows), width), dtype=np.uint8)
        for i, s in enumerate(seqs):
            codes[i, : len(s)] = np.frombuffer(s.encode("ascii"), dtype=np.uint8)
        masses = RESIDUE_TABLE[codes] + fixed_t[codes]
        pos = np.arange(width, dtype=np.uint64)
        bits = (mod_mask[rows][:, None] >> pos[None, :]) & np.uint64(1)
        masses = masses + var_t[codes] * bits.astype(np.float64)
        masses[codes == 0] = 0.0
        prefix = np.cumsum(masses, axis=1)
        total = prefix[np.arange(len(rows)), lengths - 1]
        # ion number j = 1..len-1 for both series
        j = np.arange(1, width)
        valid = j[None, :] < lengths[:, None]
        b = prefix[:, :-1] + PROTON
        suffix_idx = lengths[:, None] - j[None, :] - 1
        suffix_idx = np.clip(suffix_idx, 0, width - 1)
        y = total[:, None] - np.take_along_axis(prefix, suffix_idx, axis=1) + WATER + PROTON
        r = np.broadcast_to(rows[:, None], valid.shape)
        out_mz += [b[valid], y[valid]]
        out_row += [r[valid], r[valid]]
        out_kind += [np.zeros(valid.sum(), np.int8), np.ones(valid.sum(), np.int8)]
    if not out_mz:
        return np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int8)
    return np.concatenate(out_mz), np.concatenate(out_row), np.concatenate(out_kind)


def build_index(local: EntryTable, bases: Sequence[str], ptms: Sequence[PtmSpec] = ()) -> FragmentIonIndex:
    order = np.lexsort((local.global_id, local.precursor_mass))
    spectra = local.take(order)
    mz, owner, kind = theoretical_fragments(bases, spectra.base_id, spectra.mod_mask, ptms)
    forder = np.lexsort((kind, owner, mz))
    return FragmentIonIndex(
        precursor_mass=spectra.precursor_mass,
        global_id=spectra.global_id,
        base_id=spectra.base_id,
        mod_mask=spectra.mod_mask,
        frag_mz=mz[forder],
        frag_owner=owner[forder].astype(np.int32),
        frag_kind=kind[forder],
        bases=bases,
        ptms=tuple(ptms),
    )


def write_manifest(path: str | os.PathLike, local: EntryTable, partitions: int, rank: int) -> None:
    rec = np.zeros(len(local), dtype=MANIFEST_RECORD)
    rec["global_id"] = local.global_id
    rec["base_id"] = local.base_id
    rec["mod_mask"] = local.mod_mask
    rec["precursor_mass"] = local.precursor_mass
    with open(path, "wb") as fh:
        fh.write(MANIFEST_HEADER.pack(MANIFEST_MAGIC, partitions, rank, len(local)))
        fh.write(rec.tobytes())


def read_manifest(path: str | os.PathLike) -> tuple[int, int, EntryTable]:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, partitions, rank, count = MANIFEST_HEADER.unpack_from(data)
    if magic != MANIFEST_MAGIC:
        raise ValueError(f"{path}: bad manifest magic {magic!r}")
    expected = MANIFEST_HEADER.size + count * MANIFEST_RECORD.itemsize
    if len(data) != expected:
        raise ValueError(f"{path}: truncated manifest ({len(data)} != {expected} bytes)")
    rec = np.frombuffer(data, dtype=MANIFEST_RECORD, offset=MANIFEST_HEADER.size, count=count)
    table = EntryTable(
        rec["base_id"].astype(np.uint32),
        rec["mod_mask"].astype(np.uint64),
        rec["precursor_mass"].astype(np.float64),
        rec["global_id"].astype(np.uint32),
    )
    return partitions, rank, table


def window_counts(masses: np.ndarray, lo: float, hi: float) -> int:
    """Number of sorted masses inside the closed window ``[lo, hi]``."""
    return int(np.searchsorted(masses, hi, "right") - np.searchsorted(masses, lo, "left"))


def candidate_spread(parts: Sequence[np.ndarray], center: float, delta_m: float) -> int:
    """max - min per-partition candidate count for one precursor window."""
    counts = [window_counts(p, center - delta_m, center + delta_m) for p in parts]
    return max(counts) - min(counts)


def contiguous_split(n: int, partitions: int) -> list[np.ndarray]:
    return [np.asarray(c) for c in np.array_split(np.arange(n), partitions)]

