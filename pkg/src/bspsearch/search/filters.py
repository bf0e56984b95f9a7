"""Candidate filters and hyperscore matching against a fragment-ion index."""

from __future__ import annotations

import numpy as np

from ..chem import LOG10_FACTORIAL, MAX_FACTORIAL_ARG, ExperimentalSpectrum
from ..database import FragmentIonIndex

# Widening applied before the exact |a - b| <= tol test so searchsorted never
# drops a boundary pair to rounding.
_SEARCH_SLACK = 1e-9


def precursor_filter(masses: np.ndarray | FragmentIonIndex, query_mass: float, delta_m: float) -> tuple[int, int]:
    """Half-open range ``[lo, hi)`` of sorted masses with ``|m - query| <= delta_m``."""
    if isinstance(masses, FragmentIonIndex):
        masses = masses.precursor_mass
    n = len(masses)
    lo = int(np.searchsorted(masses, query_mass - delta_m - _SEARCH_SLACK, "left"))
    hi = int(np.searchsorted(masses, query_mass + delta_m + _SEARCH_SLACK, "right"))
    while lo < hi and abs(masses[lo] - query_mass) > delta_m:
        lo += 1
    while hi > lo and abs(masses[hi - 1] - query_mass) > delta_m:
        hi -= 1
    while lo > 0 and abs(masses[lo - 1] - query_mass) <= delta_m:
        lo -= 1
    while hi < n and abs(masses[hi] - query_mass) <= delta_m:
        hi += 1
    return lo, max(lo, hi)


def shared_peak_hits(
    index: FragmentIonIndex, lo: int, hi: int, peaks_mz: np.ndarray, delta_f: float
) -> tuple[np.ndarray, np.ndarray]:
    """All (query peak, fragment) pairs within ``delta_f`` whose owning
    spectrum lies in ``[lo, hi)``.  Returns ``(peak_idx, frag_idx)``."""
    peaks = np.asarray(peaks_mz, dtype=np.float64)
    if hi <= lo or len(peaks) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    frag_mz = index.frag_mz
    left = np.searchsorted(frag_mz, peaks - delta_f - _SEARCH_SLACK, "left")
    right = np.searchsorted(frag_mz, peaks + delta_f + _SEARCH_SLACK, "right")
    lengths = right - left
    total = int(lengths.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    peak_idx = np.repeat(np.arange(len(peaks)), lengths)
    starts = np.repeat(left - np.cumsum(lengths) + lengths, lengths)
    frag_idx = starts + np.arange(total)
    owner = index.frag_owner[frag_idx]
    keep = (owner >= lo) & (owner < hi) & (np.abs(frag_mz[frag_idx] - peaks[peak_idx]) <= delta_f)
    return peak_idx[keep], frag_idx[keep]


def shared_peak_count(
    index: FragmentIonIndex, candidate_range: tuple[int, int], query: ExperimentalSpectrum, delta_f: float
) -> np.ndarray:
    """Per-candidate count of (peak, fragment) pairs within tolerance."""
    lo, hi = candidate_range
    _, frag_idx = shared_peak_hits(index, lo, hi, query.mz, delta_f)
    return np.bincount(index.frag_owner[frag_idx] - lo, minlength=max(0, hi - lo)).astype(np.int64)


def resolve_matches(
    owner: np.ndarray,
    frag_id: np.ndarray,
    frag_mz: np.ndarray,
    frag_kind: np.ndarray,
    peak_idx: np.ndarray,
    delta: np.ndarray,
) -> np.ndarray:
    """One-to-one nearest-first matching, independently per owner.

    Pairs are visited by ascending ``|delta|`` (then fragment m/z, ion kind,
    peak index) and accepted when neither their fragment nor their peak is
    already taken.  Returns the accepted pair positions in visit order.
    """
    order = np.lexsort((peak_idx, frag_kind, frag_mz, delta, owner))
    if len(order) == 0:
        return order
    o = owner[order]
    f = frag_id[order]
    pk = o.astype(np.int64) * (int(peak_idx.max()) + 1) + peak_idx[order]
    _, finv, fcnt = np.unique(f, return_inverse=True, return_counts=True)
    _, pinv, pcnt = np.unique(pk, return_inverse=True, return_counts=True)
    clash = (fcnt[finv] > 1) | (pcnt[pinv] > 1)
    if not clash.any():
        return order
    bad_owners = np.unique(o[clash])
    in_bad = np.isin(o, bad_owners)
    accepted = ~in_bad
    positions = np.flatnonzero(in_bad)
    used_f: set = set()
    used_p: set = set()
    current = None
    for i in positions.tolist():
        if o[i] != current:
            current = o[i]
            used_f.clear()
            used_p.clear()
        fi, pi = int(f[i]), int(pk[i])
        if fi in used_f or pi in used_p:
            continue
        used_f.add(fi)
        used_p.add(pi)
        accepted[i] = True
    return order[accepted]


def log10_factorial(n: np.ndarray | int):
    return LOG10_FACTORIAL[np.minimum(n, MAX_FACTORIAL_ARG)]


def score_pairs(
    owner: np.ndarray,
    frag_id: np.ndarray,
    frag_mz: np.ndarray,
    frag_kind: np.ndarray,
    peak_idx: np.ndarray,
    peak_mz: np.ndarray,
    peak_intensity: np.ndarray,
    n_owners: int,
) -> np.ndarray:
    """Hyperscore per owner ordinal in ``range(n_owners)`` from candidate pairs."""
    delta = np.abs(frag_mz - np.asarray(peak_mz, dtype=np.float64)[peak_idx])
    acc = resolve_matches(owner, frag_id, frag_mz, frag_kind, peak_idx, delta)
    o = owner[acc]
    kind = frag_kind[acc]
    inten = np.asarray(peak_intensity, dtype=np.float64)[peak_idx[acc]]
    n_b = np.bincount(o[kind == 0], minlength=n_owners)
    n_y = np.bincount(o[kind == 1], minlength=n_owners)
    total = np.bincount(o, weights=inten, minlength=n_owners)
    return log10_factorial(n_b) + log10_factorial(n_y) + np.log10(total + 1.0)


def hyperscore(
    query: ExperimentalSpectrum, fragments: list[tuple[float, int]] | np.ndarray, delta_f: float
) -> float:
    """Hyperscore of one query against one candidate's typed fragments.

    ``fragments`` holds ``(mz, kind)`` with kind 0 for b and 1 for y ions.
    """
    frags = np.asarray(fragments, dtype=np.float64).reshape(-1, 2)
    peaks = np.asarray(query.mz, dtype=np.float64)
    if len(frags) == 0 or len(peaks) == 0:
        return 0.0
    fmz = frags[:, 0]
    diff = np.abs(fmz[None, :] - peaks[:, None])
    p_idx, f_idx = np.nonzero(diff <= delta_f)
    if len(p_idx) == 0:
        return 0.0
    score = score_pairs(
        np.zeros(len(p_idx), dtype=np.int64),
        f_idx,
        fmz[f_idx],
        frags[f_idx, 1].astype(np.int8),
        p_idx,
        peaks,
        query.intensity,
        1,
    )
    return float(score[0])


def histogram_bin(scores: np.ndarray, bin_width: float, bins: int) -> np.ndarray:
    return np.clip(np.floor(np.asarray(scores) / bin_width), 0, bins - 1).astype(np.int64)


def f32(x: float) -> float:
    return float(np.float32(x))
