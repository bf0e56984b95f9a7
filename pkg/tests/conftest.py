import numpy as np
import pytest

from bspsearch.chem import PtmSpec, SearchConfig
from bspsearch.corpus import CorpusSpec, generate_corpus
from bspsearch.config import RunConfig

OXIDATION = PtmSpec("M", 15.994915)

TOY_PROTEINS = [
    ("P1 toy", "MKWVTFISLLLLFSSAYSRGVFRRDTHKSEIAHRFKDLGEEHFKGLVLIAFSQYLQQCPFDEHVK"),
    ("P2 toy", "MEGSYIRKLVNELTEFAKTCVADESHAGCEKSLHTLFGDELCKVASLRETYGDMADCCEKQEPERNECFLSHK"),
    ("P3 toy", "MDDDIAALVVDNGSGMCKAGFAGDDAPRAVFPSIVGRPRHQGVMVGMGQKDSYVGDEAQSKRGILTLKYPIEHGIVTNWDDMEK"),
]

_ACCEPTANCE: list = []


def make_spectrum(sid, mass, mz, intensity, charge=2, scan=0):
    from bspsearch.chem import ExperimentalSpectrum

    return ExperimentalSpectrum(sid, mass, charge, np.asarray(mz, dtype=np.float32),
                                np.asarray(intensity, dtype=np.float32), scan)


@pytest.fixture
def search_cfg():
    return SearchConfig(delta_m=50.0, delta_f=0.05, min_shared_peaks=2, sampling_enabled=False)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A few hundred spectra against a small database; seconds per run."""
    out = tmp_path_factory.mktemp("small_corpus")
    generate_corpus(out, CorpusSpec(seed=3, proteins=60, spectra=120))
    return RunConfig.load(out / "corpus.conf", {"run_dir": str(out / "runs")})


@pytest.fixture(scope="session")
def bundled_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundled_corpus")
    generate_corpus(out, CorpusSpec())
    return RunConfig.load(out / "corpus.conf", {"run_dir": str(out / "runs")})


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for rep in _ACCEPTANCE:
        name = rep.nodeid.split("::")[-1]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = dict(rep.user_properties).get("detail", "")
        if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2]
        terminalreporter.write_line(f"{status}  {name:<48} {rep.duration:8.2f} s  {detail}")


def oracle_instance(candidates, queries, seed=0, sampling=False):
    """A database of exactly ``candidates`` entries, ``queries`` spectra drawn
    mostly from it, the matching index and the oracle's candidate list."""
    import oracles
    from bspsearch.chem import DatabaseConfig
    from bspsearch.corpus import CorpusSpec, synthetic_proteins, synthetic_spectrum
    from bspsearch.database import build_index, generate_database
    from bspsearch.spectra import SpectrumBatch, preprocess

    rng = np.random.default_rng(seed)
    proteins = synthetic_proteins(max(10, candidates // 40), 300, rng)
    db = generate_database(proteins, DatabaseConfig(ptms=(OXIDATION,), max_mods_per_peptide=2))
    assert len(db.entries) >= candidates
    local = db.entries.take(np.arange(candidates))
    index = build_index(local, db.bases, db.ptms)
    variable = {"M": OXIDATION.delta_mass}
    oracle_db = [
        (int(local.global_id[i]), float(local.precursor_mass[i]),
         oracles.fragments(db.bases[int(local.base_id[i])], int(local.mod_mask[i]), variable))
        for i in range(candidates)
    ]
    cfg = SearchConfig(delta_m=300.0, delta_f=0.5, min_shared_peaks=4, sampling_enabled=sampling)
    spec = CorpusSpec()
    spectra = []
    for sid in range(queries):
        gid = int(rng.integers(candidates))
        seq = db.bases[int(local.base_id[gid])]
        mass = float(local.precursor_mass[gid]) + rng.normal(0, 0.005)
        mz, inten = synthetic_spectrum(seq, int(local.mod_mask[gid]), db.ptms, mass, 2, spec, rng)
        raw = make_spectrum(sid, mass, mz, inten)
        spectra.append(preprocess(raw, cfg))
    return db, local, index, oracle_db, SpectrumBatch(0, spectra), cfg
