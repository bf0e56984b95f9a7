"""Compare a run's PSMs against a single-rank, unsampled reference run."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .assembly import read_psm_rows

# columns that legitimately depend on how the database was partitioned
RANK_DEPENDENT = ("origin_rank",)


@dataclass
class PsmComparison:
    reference: int
    candidate: int
    same_peptide: int
    identical_rows: int
    missing: list[int] = field(default_factory=list)
    extra: list[int] = field(default_factory=list)
    nan_mismatch: list[int] = field(default_factory=list)
    log10_deltas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    first_difference: int | None = None

    @property
    def identity(self) -> float:
        return self.same_peptide / self.reference if self.reference else 1.0

    @property
    def max_log10_delta(self) -> float:
        return float(self.log10_deltas.max()) if len(self.log10_deltas) else 0.0

    @property
    def exact(self) -> bool:
        return self.identical_rows == self.reference == self.candidate

    def within(self, identity: float, max_delta: float) -> bool:
        return (
            not self.missing
            and not self.extra
            and not self.nan_mismatch
            and self.identity >= identity
            and self.max_log10_delta <= max_delta
        )

    def summary(self) -> str:
        lines = [
            f"reference PSMs   {self.reference}",
            f"candidate PSMs   {self.candidate}",
            f"peptide identity {self.identity:.4%}",
            f"identical rows   {self.identical_rows}",
            f"missing / extra  {len(self.missing)} / {len(self.extra)}",
            f"e-value fit presence mismatches {len(self.nan_mismatch)}",
        ]
        if len(self.log10_deltas):
            q = np.percentile(self.log10_deltas, [50, 90, 99])
            lines.append(
                f"|dlog10 e| on {len(self.log10_deltas)} matched PSMs: median {q[0]:.3g} "
                f"p90 {q[1]:.3g} p99 {q[2]:.3g} max {self.max_log10_delta:.3g}"
            )
        if self.first_difference is not None:
            lines.append(f"first differing spectrum_id {self.first_difference}")
        return "\n".join(lines)


def load_psms(paths: Sequence[str | os.PathLike]) -> dict[int, dict[str, str]]:
    out: dict[int, dict[str, str]] = {}
    for p in paths:
        for row in read_psm_rows(p):
            sid = int(row["spectrum_id"])
            if sid in out:
                raise ValueError(f"spectrum_id {sid} appears twice ({p})")
            out[sid] = row
    return out


def psm_paths(run_root: str | os.PathLike) -> list[Path]:
    return sorted(Path(run_root, "psms").glob("psms_*.tsv"))


def _log10(x: float) -> float:
    return math.log10(max(x, 1e-300))


def compare_psms(reference: dict[int, dict[str, str]], candidate: dict[int, dict[str, str]]) -> PsmComparison:
    """Peptide identity, row equality (ignoring rank-dependent columns) and
    e-value deltas over PSMs whose top peptide agrees."""
    cmp = PsmComparison(len(reference), len(candidate), 0, 0)
    cmp.missing = sorted(set(reference) - set(candidate))
    cmp.extra = sorted(set(candidate) - set(reference))
    deltas = []
    first = [cmp.missing[0]] if cmp.missing else []
    first += cmp.extra[:1]
    for sid in sorted(set(reference) & set(candidate)):
        a, b = reference[sid], candidate[sid]
        strip_a = {k: v for k, v in a.items() if k not in RANK_DEPENDENT}
        strip_b = {k: v for k, v in b.items() if k not in RANK_DEPENDENT}
        if strip_a == strip_b:
            cmp.identical_rows += 1
        else:
            first.append(sid)
        if (a["peptide"], a["mods"]) != (b["peptide"], b["mods"]):
            continue
        cmp.same_peptide += 1
        ea, eb = float(a["e_value"]), float(b["e_value"])
        if math.isnan(ea) or math.isnan(eb):
            if math.isnan(ea) != math.isnan(eb):
                cmp.nan_mismatch.append(sid)
            continue
        deltas.append(abs(_log10(ea) - _log10(eb)))
    cmp.log10_deltas = np.asarray(deltas, dtype=np.float64)
    cmp.first_difference = min(first) if first else None
    return cmp
