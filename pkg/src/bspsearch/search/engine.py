"""Partial database search of one spectrum batch against a local index."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..chem import ExperimentalSpectrum, SearchConfig
from ..database import FragmentIonIndex
from ..spectra import SpectrumBatch
from .filters import histogram_bin, precursor_filter, score_pairs, shared_peak_hits
from .results import (
    FLAG_EMPTY,
    FLAG_FULL_HISTOGRAM,
    FLAG_LOCAL_HEAP,
    NO_ENTRY,
    WIRE_SAMPLES,
    PartialResult,
    sample_distribution,
)


@dataclass
class SearchCounters:
    """Filter counters: precursor candidates (alpha), shared-ion pairs
    (sigma) and candidates scored after the shared-peak filter (mu)."""

    alpha: int = 0
    sigma: int = 0
    mu: int = 0
    queries: int = 0

    def merge(self, other: "SearchCounters") -> None:
        self.alpha += other.alpha
        self.sigma += other.sigma
        self.mu += other.mu
        self.queries += other.queries

    def as_dict(self) -> dict[str, int]:
        return {"alpha": self.alpha, "sigma": self.sigma, "mu": self.mu, "queries": self.queries}


@dataclass
class QueryResult:
    partial: PartialResult
    histogram: np.ndarray
    top_ids: np.ndarray
    top_scores: np.ndarray


@dataclass
class BatchResult:
    tag: int
    results: list[QueryResult]
    counters: SearchCounters = field(default_factory=SearchCounters)

    @property
    def partials(self) -> list[PartialResult]:
        return [r.partial for r in self.results]

    def heap_arrays(self, top_m: int) -> tuple[np.ndarray, np.ndarray]:
        ids = np.full((len(self.results), top_m), NO_ENTRY, dtype=np.uint32)
        scores = np.zeros((len(self.results), top_m), dtype=np.float32)
        for i, r in enumerate(self.results):
            ids[i, : len(r.top_ids)] = r.top_ids
            scores[i, : len(r.top_scores)] = r.top_scores
        return ids, scores


def rank_hits(global_ids: np.ndarray, scores: np.ndarray, m: int) -> np.ndarray:
    """Positions of the best ``m`` hits by (float32 score desc, global id asc)."""
    s32 = np.asarray(scores, dtype=np.float32)
    order = np.lexsort((np.asarray(global_ids), -s32.astype(np.float64)))
    return order[:m]


def score_candidates(
    index: FragmentIonIndex, query: ExperimentalSpectrum, config: SearchConfig, counters: SearchCounters | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Local ordinals and hyperscores of candidates passing both filters."""
    lo, hi = precursor_filter(index.precursor_mass, query.precursor_mass, config.delta_m)
    peak_idx, frag_idx = shared_peak_hits(index, lo, hi, query.mz, config.delta_f)
    owner = index.frag_owner[frag_idx].astype(np.int64) - lo
    counts = np.bincount(owner, minlength=hi - lo)
    survivors = np.flatnonzero(counts >= config.min_shared_peaks)
    if counters is not None:
        counters.alpha += hi - lo
        counters.sigma += len(frag_idx)
        counters.mu += len(survivors)
        counters.queries += 1
    if len(survivors) == 0:
        return survivors, np.zeros(0)
    keep = counts[owner] >= config.min_shared_peaks
    ordinal = np.full(hi - lo, -1, dtype=np.int64)
    ordinal[survivors] = np.arange(len(survivors))
    frag_idx = frag_idx[keep]
    scores = score_pairs(
        ordinal[owner[keep]],
        frag_idx,
        index.frag_mz[frag_idx],
        index.frag_kind[frag_idx],
        peak_idx[keep],
        query.mz,
        query.intensity,
        len(survivors),
    )
    return survivors + lo, scores


def search_query(
    index: FragmentIonIndex, query: ExperimentalSpectrum, config: SearchConfig, counters: SearchCounters | None = None
) -> QueryResult:
    local, scores = score_candidates(index, query, config, counters)
    hist = np.zeros(config.histogram_bins, dtype=np.uint32)
    if len(local) == 0:
        empty = np.zeros(0, dtype=np.uint32)
        partial = PartialResult(query.spectrum_id)
        if not config.sampling_enabled:
            partial.flags |= FLAG_FULL_HISTOGRAM
            partial.full_histogram = hist
        return QueryResult(partial, hist, empty, np.zeros(0, dtype=np.float32))
    hist += np.bincount(
        histogram_bin(scores, config.histogram_bin_width, config.histogram_bins), minlength=config.histogram_bins
    ).astype(np.uint32)
    gids = index.global_id[local]
    best = rank_hits(gids, scores, config.top_m)
    top_ids = gids[best].astype(np.uint32)
    top_scores = scores[best].astype(np.float32)
    partial = PartialResult(
        query_id=query.spectrum_id,
        entry_id=int(top_ids[0]),
        hyperscore=float(top_scores[0]),
        candidate_count=len(local),
        flags=FLAG_LOCAL_HEAP,
    )
    if config.sampling_enabled:
        start, samples, flags = sample_distribution(hist, config.sample_count)
        partial.hist_start_bin = start
        partial.sample_len = len(samples)
        partial.samples = np.zeros(max(WIRE_SAMPLES, len(samples)), dtype=np.uint16)
        partial.samples[: len(samples)] = samples
        partial.flags |= flags
    else:
        partial.flags |= FLAG_FULL_HISTOGRAM
        partial.full_histogram = hist
    return QueryResult(partial, hist, top_ids, top_scores)


def search_batch(batch: SpectrumBatch, index: FragmentIonIndex, config: SearchConfig) -> BatchResult:
    """Run both filters, score survivors and build one result per query."""
    counters = SearchCounters()
    results = [search_query(index, q, config, counters) for q in batch.spectra]
    return BatchResult(batch.tag, results, counters)


__all__ = [
    "BatchResult",
    "FLAG_EMPTY",
    "QueryResult",
    "SearchCounters",
    "rank_hits",
    "score_candidates",
    "search_batch",
    "search_query",
]
