"""Deterministic synthetic corpus: a protein FASTA, MS2 spectra drawn from
its peptides (plus unmatched decoy-like spectra) and a run config."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chem import PROTON, DatabaseConfig, fragment_ions_typed
from .config import RunConfig, format_ptms
from .database import generate_database

# Approximate background residue frequencies (percent) of natural proteomes.
BACKGROUND = {
    "A": 8.3, "R": 5.5, "N": 4.1, "D": 5.5, "C": 1.4, "Q": 3.9, "E": 6.7, "G": 7.1, "H": 2.3, "I": 5.9,
    "L": 9.7, "K": 5.8, "M": 2.4, "F": 3.9, "P": 4.7, "S": 6.6, "T": 5.3, "W": 1.1, "Y": 2.9, "V": 6.9,
}

DEFAULT_PTMS = "M+15.994915:var"


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 7
    proteins: int = 1200
    protein_length: int = 400
    spectra: int = 2000
    matched_fraction: float = 0.8
    fragment_keep: float = 0.6
    noise_peaks: int = 30
    mz_noise: float = 0.004
    ptms: str = DEFAULT_PTMS


def synthetic_proteins(n: int, length: int, rng: np.random.Generator) -> list[tuple[str, str]]:
    letters = np.array(sorted(BACKGROUND))
    p = np.array([BACKGROUND[a] for a in letters])
    p = p / p.sum()
    out = []
    for i in range(n):
        L = max(20, int(rng.normal(length, length * 0.25)))
        seq = "M" + "".join(rng.choice(letters, size=L - 1, p=p))
        out.append((f"SYN{i:05d} synthetic protein {i}", seq))
    return out


def write_fasta(path: str | os.PathLike, proteins: list[tuple[str, str]], width: int = 60) -> None:
    with open(path, "w") as fh:
        for desc, seq in proteins:
            fh.write(f">{desc}\n")
            for i in range(0, len(seq), width):
                fh.write(seq[i : i + width] + "\n")


def synthetic_spectrum(sequence: str, mask: int, ptms, mass: float, charge: int, spec: CorpusSpec, rng):
    """Peaks for a peptide: a random subset of its b/y ions with m/z jitter,
    plus uniformly placed noise peaks of lower intensity."""
    ions = fragment_ions_typed(sequence, mask, ptms)
    mz = np.array([m for m, _ in ions])
    keep = rng.random(len(mz)) < spec.fragment_keep
    mz = mz[keep] + rng.normal(0.0, spec.mz_noise, keep.sum())
    inten = rng.lognormal(3.0, 0.6, len(mz))
    noise_mz = rng.uniform(100.0, max(200.0, mass), spec.noise_peaks)
    noise_in = rng.lognormal(1.8, 0.6, spec.noise_peaks)
    allmz = np.concatenate([mz, noise_mz])
    allint = np.concatenate([inten, noise_in])
    order = np.argsort(allmz)
    return allmz[order], allint[order]


def write_ms2(path: str | os.PathLike, records: list[tuple[int, float, int, np.ndarray, np.ndarray]]) -> None:
    with open(path, "w") as fh:
        fh.write("H\tCreationDate\tsynthetic\n")
        for scan, pmz, z, mz, inten in records:
            fh.write(f"S\t{scan}\t{pmz:.6f}\t{z}\n")
            for m, i in zip(mz, inten):
                fh.write(f"{m:.5f} {i:.3f}\n")


def corpus_config(spec: CorpusSpec = CorpusSpec()) -> RunConfig:
    return RunConfig(
        ptms=spec.ptms,
        delta_m=200.0,
        delta_f=0.5,
        min_shared_peaks=4,
        max_mods_per_peptide=2,
        histogram_bin_width=0.2,
        tail_min_survival=5.0,
    )


def generate_corpus(out_dir: str | os.PathLike, spec: CorpusSpec = CorpusSpec()) -> RunConfig:
    """Write ``corpus.fasta``, ``corpus.ms2`` and ``corpus.conf`` into ``out_dir``.

    Output is a pure function of ``spec``.  Returns the run config pointing
    at the written files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    proteins = synthetic_proteins(spec.proteins, spec.protein_length, rng)
    fasta = out / "corpus.fasta"
    write_fasta(fasta, proteins)
    cfg = corpus_config(spec)
    db_cfg: DatabaseConfig = cfg.database_config()
    db = generate_database(proteins, db_cfg)
    records = []
    n = len(db.entries)
    for scan in range(1, spec.spectra + 1):
        z = int(rng.choice([2, 3], p=[0.7, 0.3]))
        if rng.random() < spec.matched_fraction:
            gid = int(rng.integers(n))
            seq = db.sequence(gid)
            mask = int(db.entries.mod_mask[gid])
            mass = float(db.entries.precursor_mass[gid]) + rng.normal(0, 0.005)
            mz, inten = synthetic_spectrum(seq, mask, db.ptms, mass, z, spec, rng)
        else:
            mass = float(rng.uniform(800, 3000))
            k = int(rng.integers(20, 60))
            mz = np.sort(rng.uniform(100, mass, k))
            inten = rng.lognormal(2.5, 0.8, k)
        records.append((scan, (mass + z * PROTON) / z, z, mz, inten))
    write_ms2(out / "corpus.ms2", records)
    cfg = cfg.with_overrides(fasta=str(fasta), ms2=str(out / "corpus.ms2"))
    (out / "corpus.conf").write_text(
        "# synthetic corpus\n"
        f"fasta={fasta.name}\nms2=corpus.ms2\nptms={format_ptms(tuple(db.ptms))}\n"
        f"delta_m={cfg.delta_m}\ndelta_f={cfg.delta_f}\nmin_shared_peaks={cfg.min_shared_peaks}\n"
        f"max_mods_per_peptide={cfg.max_mods_per_peptide}\n"
        f"histogram_bin_width={cfg.histogram_bin_width}\ntail_min_survival={cfg.tail_min_survival}\n"
    )
    return cfg
