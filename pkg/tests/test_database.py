import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import OXIDATION, TOY_PROTEINS
from bspsearch.chem import DatabaseConfig, InvalidInputError, PtmSpec, fragment_ions
from bspsearch.corpus import synthetic_proteins
from bspsearch.database import (
    EntryTable,
    FastaError,
    build_index,
    candidate_spread,
    cleavage_sites,
    contiguous_split,
    digest,
    expand_variants,
    generate_database,
    local_share,
    mod_distance,
    parse_fasta,
    partition,
    read_manifest,
    window_counts,
    write_manifest,
)

OPEN = DatabaseConfig(missed_cleavages=0, len_range=(1, 46), mass_range=(0.0, math.inf))
PHOSPHO = PtmSpec("S", 79.966331)


def test_parse_fasta():
    text = ">a first\nMKR\nAC*\n; comment\n\n>b\nwk\n"
    assert parse_fasta(text) == [("a first", "MKRAC"), ("b", "WK")]


def test_parse_fasta_errors_carry_line():
    with pytest.raises(FastaError) as err:
        parse_fasta("MKR\n>a\n")
    assert err.value.line == 1
    with pytest.raises(FastaError) as err:
        parse_fasta(">a\nMK1R\n")
    assert err.value.line == 2


def test_cleavage_sites():
    assert cleavage_sites("MKR") == [2, 3]
    assert cleavage_sites("MKPR") == [4]
    assert cleavage_sites("AAA") == [3]


def test_digest_small_examples():
    assert set(digest(["MKR"], OPEN)) == {"MK", "R"}
    assert set(digest(["MKPR"], OPEN)) == {"MKPR"}


def test_digest_matches_enumeration_oracle():
    cfg = DatabaseConfig(missed_cleavages=2, len_range=(6, 46))
    seqs = [s for _, s in TOY_PROTEINS]
    got = digest(TOY_PROTEINS, cfg)
    assert len(got) == len(set(got))
    assert set(got) == oracles.digest(seqs, 2, (6, 46), (500.0, 5000.0))


@given(st.lists(st.text(alphabet="AKRPMG", min_size=1, max_size=40), min_size=1, max_size=4), st.integers(0, 3))
@settings(max_examples=100, deadline=None)
def test_digest_property(proteins, missed):
    cfg = DatabaseConfig(missed_cleavages=missed, len_range=(1, 46), mass_range=(0.0, 1e9))
    assert set(digest(proteins, cfg)) == oracles.digest(proteins, missed, (1, 46), (0.0, 1e9))


def test_digest_orders_by_mass():
    got = digest(TOY_PROTEINS, DatabaseConfig())
    masses = [oracles.mass(p) for p in got]
    assert masses == sorted(masses)


def test_expand_variants_counts():
    cfg = DatabaseConfig(len_range=(1, 46), mass_range=(0.0, math.inf), ptms=(OXIDATION,), max_mods_per_peptide=2)
    assert len(expand_variants(["AAK"], cfg)) == 1
    mm = expand_variants(["MM"], cfg)
    assert sorted(mm.mod_mask.tolist()) == [0, 1, 2, 3]
    assert mm.mod_mask[0] == 0  # unmodified first


def test_expand_variants_respects_cap_and_mass_range():
    cfg = DatabaseConfig(len_range=(1, 46), mass_range=(0.0, math.inf), ptms=(OXIDATION,), max_mods_per_peptide=1)
    assert len(expand_variants(["MMM"], cfg)) == 4
    m0 = oracles.mass("MMM")
    cfg = DatabaseConfig(len_range=(1, 46), mass_range=(0.0, m0 + 20), ptms=(OXIDATION,), max_mods_per_peptide=3)
    assert len(expand_variants(["MMM"], cfg)) == 4


def test_expand_variants_matches_enumeration_oracle():
    cfg = DatabaseConfig(missed_cleavages=1, ptms=(OXIDATION, PHOSPHO), max_mods_per_peptide=3)
    bases = digest(TOY_PROTEINS, cfg)
    table = expand_variants(bases, cfg)
    variable = {"M": OXIDATION.delta_mass, "S": PHOSPHO.delta_mass}
    want = {(b, m) for b, seq in enumerate(bases) for m in oracles.variants(seq, variable, 3, cfg.mass_range)}
    got = set(zip(table.base_id.tolist(), table.mod_mask.tolist()))
    assert got == want
    assert len(table) == len(want)
    for i in range(0, len(table), 7):
        seq = bases[int(table.base_id[i])]
        assert table.precursor_mass[i] == pytest.approx(oracles.mass(seq, int(table.mod_mask[i]), variable), abs=1e-8)


def test_fixed_mods_always_applied():
    cam = PtmSpec("C", 57.021464, True)
    cfg = DatabaseConfig(len_range=(1, 46), mass_range=(0.0, math.inf), ptms=(cam,))
    table = expand_variants(["ACK"], cfg)
    assert len(table) == 1
    assert table.precursor_mass[0] == pytest.approx(oracles.mass("ACK", fixed={"C": 57.021464}), abs=1e-9)


def test_mod_distance_examples():
    p = oracles.parse_starred("MEGSYIRK")
    q = oracles.parse_starred("ME*GSYI*RK")
    r = oracles.parse_starred("MEGS*Y*IRK")
    assert mod_distance(p[1], q[1], 8) == 1.625
    assert mod_distance(p[1], r[1], 8) == 1.25
    assert mod_distance(q[1], q[1], 8) == 0.0


@given(st.integers(1, 40).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, 2**n - 1), st.integers(0, 2**n - 1))))
@settings(max_examples=300, deadline=None)
def test_mod_distance_properties(args):
    n, x, y = args
    d = mod_distance(x, y, n)
    assert 0.0 <= d <= 2.0
    assert d == mod_distance(y, x, n)
    assert (d == 0.0) == (x == y)
    sx = "".join("A*" if x >> i & 1 else "A" for i in range(n))
    sy = "".join("A*" if y >> i & 1 else "A" for i in range(n))
    assert d == pytest.approx(oracles.mod_distance(sx, sy), abs=1e-12)


def _toy_db(**kw):
    cfg = DatabaseConfig(ptms=(OXIDATION,), max_mods_per_peptide=2, **kw)
    return generate_database(TOY_PROTEINS, cfg)


def test_partition_single_worker_is_identity():
    db = _toy_db()
    (only,) = partition(db.entries, 1, db.base_lengths)
    assert np.array_equal(only.global_id, db.entries.global_id)
    assert np.array_equal(only.mod_mask, db.entries.mod_mask)


def test_partition_scatters_variants_of_one_base():
    cfg = DatabaseConfig(len_range=(1, 46), mass_range=(0.0, math.inf), ptms=(OXIDATION,), max_mods_per_peptide=3)
    table = expand_variants(["MAMAMK"], cfg)
    assert len(table) == 8
    parts = partition(table, 4, np.array([6]))
    assert [len(p) for p in parts] == [2, 2, 2, 2]


def test_canonical_order_groups_bases_by_mod_distance():
    db = _toy_db()
    e = db.entries
    assert np.array_equal(e.global_id, np.arange(len(e)))
    assert np.all(np.diff(e.base_id.astype(np.int64)) >= 0)
    lengths = db.base_lengths
    for b in np.unique(e.base_id)[:20]:
        rows = np.flatnonzero(e.base_id == b)
        d = [mod_distance(int(m), 0, int(lengths[b])) for m in e.mod_mask[rows]]
        assert d == sorted(d)
        assert e.mod_mask[rows[0]] == 0 or d[0] > 0


@given(st.integers(1, 9), st.sampled_from(["round_robin", "random"]), st.integers(0, 5))
@settings(max_examples=30, deadline=None)
def test_partition_is_exact_cover(P, scatter, seed):
    db = _toy_db()
    parts = partition(db.entries, P, db.base_lengths, scatter, seed)
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1
    ids = np.concatenate([p.global_id for p in parts])
    assert sorted(ids.tolist()) == list(range(len(db.entries)))
    for r in range(P):
        assert np.array_equal(local_share(db, r, P, scatter, seed).global_id, parts[r].global_id)


def _clustered_db():
    rng = np.random.default_rng(11)
    proteins = synthetic_proteins(150, 300, rng)
    cfg = DatabaseConfig(ptms=(OXIDATION,), max_mods_per_peptide=2)
    return generate_database(proteins, cfg)


def test_partition_balances_windows_better_than_contiguous_split():
    db = _clustered_db()
    P = 4
    rr = [np.sort(p.precursor_mass) for p in partition(db.entries, P, db.base_lengths)]
    blocks = [np.sort(db.entries.precursor_mass[idx]) for idx in contiguous_split(len(db.entries), P)]
    rng = np.random.default_rng(5)
    for center in rng.choice(db.entries.precursor_mass, 100):
        lo, hi = center - 10.0, center + 10.0
        a = [window_counts(p, lo, hi) for p in rr]
        b = [window_counts(p, lo, hi) for p in blocks]
        assert a == [oracles.window_count(p, lo, hi) for p in rr]
        assert max(a) / np.mean(a) <= max(b) / np.mean(b)
        assert candidate_spread(rr, center, 10.0) <= candidate_spread(blocks, center, 10.0)


def test_build_index_empty_partition():
    empty = EntryTable(np.zeros(0, np.uint32), np.zeros(0, np.uint64), np.zeros(0), np.zeros(0, np.uint32))
    index = build_index(empty, [], ())
    assert index.local_size == 0
    assert len(index.frag_mz) == 0


def test_build_index_two_peptides():
    bases = ["PEPTIDEK", "AGMK"]
    cfg = DatabaseConfig(len_range=(1, 46), mass_range=(0.0, math.inf))
    table = expand_variants(bases, cfg)
    index = build_index(table, bases)
    assert len(index.frag_mz) == 2 * 7 + 2 * 3
    assert np.all(np.diff(index.frag_mz) >= 0)
    assert np.all(np.diff(index.precursor_mass) >= 0)


def test_build_index_membership_oracle():
    db = _clustered_db()
    local = db.entries.take(np.arange(min(10_000, len(db.entries))))
    index = build_index(local, db.bases, db.ptms)
    assert np.all(np.diff(index.frag_mz) >= 0)
    rng = np.random.default_rng(2)
    for local_id in rng.choice(index.local_size, 300, replace=False):
        seq = index.sequence(local_id)
        want = fragment_ions(seq, int(index.mod_mask[local_id]), db.ptms)
        got = np.sort(index.frag_mz[index.frag_owner == local_id])
        assert got.tolist() == want
        ref = [mz for mz, _ in oracles.fragments(seq, int(index.mod_mask[local_id]), {"M": OXIDATION.delta_mass})]
        assert got == pytest.approx(ref, abs=1e-8)
    total = sum(2 * (len(index.sequence(i)) - 1) for i in range(index.local_size))
    assert len(index.frag_mz) == total


def test_manifest_round_trip(tmp_path):
    db = _toy_db()
    local = local_share(db, 1, 3)
    path = tmp_path / "part_1.hcp"
    write_manifest(path, local, 3, 1)
    assert path.stat().st_size == 16 + 24 * len(local)
    P, rank, back = read_manifest(path)
    assert (P, rank) == (3, 1)
    for name in ("base_id", "mod_mask", "precursor_mass", "global_id"):
        assert np.array_equal(getattr(back, name), getattr(local, name))


def test_manifest_corruption_detected(tmp_path):
    db = _toy_db()
    path = tmp_path / "part_0.hcp"
    write_manifest(path, local_share(db, 0, 1), 1, 0)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(ValueError):
        read_manifest(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        read_manifest(path)


def test_long_peptide_rejected():
    cfg = DatabaseConfig(len_range=(1, 100), mass_range=(0.0, math.inf))
    with pytest.raises(InvalidInputError):
        expand_variants(["A" * 65], cfg)
