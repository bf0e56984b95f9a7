"""Chemistry constants and the peptide/spectrum domain types.

Masses are monoisotopic, fragments are singly charged b- and y-ions.
The constants below are pinned so that golden values stay bit-stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROTON = 1.007276
WATER = 18.010565

# Residue (not free amino acid) masses, Da.
RESIDUE_MASSES: dict[str, float] = {
    "G": 57.021464,
    "A": 71.037114,
    "S": 87.032028,
    "P": 97.052764,
    "V": 99.068414,
    "T": 101.047679,
    "C": 103.009185,
    "L": 113.084064,
    "I": 113.084064,
    "N": 114.042927,
    "D": 115.026943,
    "Q": 128.058578,
    "K": 128.094963,
    "E": 129.042593,
    "M": 131.040485,
    "H": 137.058912,
    "F": 147.068414,
    "R": 156.101111,
    "Y": 163.063329,
    "W": 186.079313,
}

AMINO_ACIDS = "".join(sorted(RESIDUE_MASSES))

# Byte-indexed lookup table for vectorised mass sums (0 marks an invalid letter).
RESIDUE_TABLE = np.zeros(256, dtype=np.float64)
for _aa, _m in RESIDUE_MASSES.items():
    RESIDUE_TABLE[ord(_aa)] = _m

MAX_FACTORIAL_ARG = 64
LOG10_FACTORIAL = np.array(
    [math.lgamma(n + 1) / math.log(10) for n in range(MAX_FACTORIAL_ARG + 1)]
)


class InvalidInputError(ValueError):
    """Raised for malformed sequences, residues or parameters."""


@dataclass(frozen=True)
class Residue:
    letter: str
    mono_mass: float


RESIDUES: tuple[Residue, ...] = tuple(
    Residue(aa, RESIDUE_MASSES[aa]) for aa in AMINO_ACIDS
)


@dataclass(frozen=True)
class PtmSpec:
    target_residue: str
    delta_mass: float
    is_fixed: bool = False

    def __post_init__(self):
        if self.target_residue not in RESIDUE_MASSES:
            raise InvalidInputError(f"unknown PTM target residue {self.target_residue!r}")
        if not math.isfinite(self.delta_mass):
            raise InvalidInputError("PTM delta_mass must be finite")

    def label(self) -> str:
        return f"{self.target_residue}{self.delta_mass:+.4f}"


def validate_ptms(ptms: Sequence[PtmSpec]) -> None:
    """Reject PTM sets a position bitmask cannot represent unambiguously."""
    fixed = set()
    variable = set()
    for p in ptms:
        pool = fixed if p.is_fixed else variable
        if p.target_residue in pool:
            raise InvalidInputError(
                f"more than one {'fixed' if p.is_fixed else 'variable'} PTM on {p.target_residue}"
            )
        pool.add(p.target_residue)
    both = fixed & variable
    if both:
        raise InvalidInputError(f"residues with both fixed and variable PTMs: {sorted(both)}")


def _ptm_maps(ptms: Sequence[PtmSpec]) -> tuple[dict[str, float], dict[str, float]]:
    fixed = {p.target_residue: p.delta_mass for p in ptms if p.is_fixed}
    variable = {p.target_residue: p.delta_mass for p in ptms if not p.is_fixed}
    return fixed, variable


def residue_mass(letter: str) -> float:
    try:
        return RESIDUE_MASSES[letter]
    except KeyError:
        raise InvalidInputError(f"not a standard residue: {letter!r}") from None


def position_masses(sequence: str, mod_mask: int = 0, ptms: Sequence[PtmSpec] = ()) -> list[float]:
    """Per-position residue masses with fixed and mask-selected variable PTMs applied."""
    fixed, variable = _ptm_maps(ptms)
    if mod_mask >> len(sequence):
        raise InvalidInputError("mod_mask has bits beyond the sequence length")
    masses = []
    for i, aa in enumerate(sequence):
        m = residue_mass(aa) + fixed.get(aa, 0.0)
        if mod_mask >> i & 1:
            if aa not in variable:
                raise InvalidInputError(f"no variable PTM defined for {aa} at position {i}")
            m += variable[aa]
        masses.append(m)
    return masses


def peptide_mass(sequence: str, mod_mask: int = 0, ptms: Sequence[PtmSpec] = ()) -> float:
    """Neutral monoisotopic mass: residues + applied PTMs + water."""
    return math.fsum(position_masses(sequence, mod_mask, ptms)) + WATER


def fragment_ions(sequence: str, mod_mask: int = 0, ptms: Sequence[PtmSpec] = ()) -> list[float]:
    """Ascending singly-charged b/y ion m/z values, 2*(len-1) of them."""
    return [mz for mz, _ in fragment_ions_typed(sequence, mod_mask, ptms)]


def fragment_ions_typed(
    sequence: str, mod_mask: int = 0, ptms: Sequence[PtmSpec] = ()
) -> list[tuple[float, int]]:
    """Like :func:`fragment_ions` but each ion is paired with its kind (0=b, 1=y)."""
    if len(sequence) < 2:
        raise InvalidInputError("fragment ions need a peptide of length >= 2")
    masses = position_masses(sequence, mod_mask, ptms)
    prefix = np.cumsum(masses)
    total = prefix[-1]
    ions = []
    for i in range(1, len(sequence)):
        ions.append((float(prefix[i - 1] + PROTON), 0))
        ions.append((float(total - prefix[len(sequence) - i - 1] + WATER + PROTON), 1))
    ions.sort()
    return ions


def variable_sites(sequence: str, ptms: Sequence[PtmSpec]) -> list[int]:
    variable = {p.target_residue for p in ptms if not p.is_fixed}
    return [i for i, aa in enumerate(sequence) if aa in variable]


def describe_mods(sequence: str, mod_mask: int, ptms: Sequence[PtmSpec]) -> str:
    """Human readable variable-mod list, e.g. ``M3+15.9949;S5+79.9663``; ``-`` if none."""
    _, variable = _ptm_maps(ptms)
    parts = [
        f"{aa}{i + 1}{variable[aa]:+.4f}"
        for i, aa in enumerate(sequence)
        if mod_mask >> i & 1
    ]
    return ";".join(parts) if parts else "-"


@dataclass(frozen=True)
class PeptideEntry:
    base_id: int
    mod_mask: int
    precursor_mass: float


@dataclass(frozen=True)
class TheoreticalSpectrum:
    entry: PeptideEntry
    fragments: tuple[float, ...]


@dataclass
class ExperimentalSpectrum:
    spectrum_id: int
    precursor_mass: float
    charge: int
    mz: np.ndarray
    intensity: np.ndarray
    scan: int = 0

    @property
    def peak_count(self) -> int:
        return len(self.mz)


@dataclass(frozen=True)
class SearchConfig:
    delta_m: float = 10.0
    delta_f: float = 0.02
    min_shared_peaks: int = 4
    top_m: int = 10
    top_b_peaks: int = 100
    sample_count: int = 120
    batch_cap: int = 10_000
    histogram_bins: int = 1024
    histogram_bin_width: float = 0.1
    sampling_enabled: bool = True

    def __post_init__(self):
        if not self.delta_f > 0:
            raise InvalidInputError("delta_f must be > 0")
        if not self.delta_m >= 0:
            raise InvalidInputError("delta_m must be >= 0")
        if not 0 < self.sample_count <= self.histogram_bins:
            raise InvalidInputError("sample_count must be in (0, histogram_bins]")
        if self.top_m < 1:
            raise InvalidInputError("top_m must be >= 1")
        if self.batch_cap < 1 or self.top_b_peaks < 1:
            raise InvalidInputError("batch_cap and top_b_peaks must be >= 1")


@dataclass(frozen=True)
class DatabaseConfig:
    enzyme: str = "trypsin"
    missed_cleavages: int = 2
    len_range: tuple[int, int] = (6, 46)
    mass_range: tuple[float, float] = (500.0, 5000.0)
    ptms: tuple[PtmSpec, ...] = field(default_factory=tuple)
    max_mods_per_peptide: int = 3
    partitions: int = 1

    def __post_init__(self):
        if self.enzyme != "trypsin":
            raise InvalidInputError(f"unsupported enzyme {self.enzyme!r}")
        lo, hi = self.len_range
        if not 0 <= lo <= hi:
            raise InvalidInputError("empty len_range")
        mlo, mhi = self.mass_range
        if not mlo <= mhi:
            raise InvalidInputError("empty mass_range")
        if self.partitions < 1:
            raise InvalidInputError("partitions must be >= 1")
        if self.missed_cleavages < 0 or self.max_mods_per_peptide < 0:
            raise InvalidInputError("missed_cleavages and max_mods_per_peptide must be >= 0")
        validate_ptms(self.ptms)
