"""Flat key=value run configuration."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .chem import DatabaseConfig, InvalidInputError, PtmSpec, SearchConfig

RUN_DIR_ENV = "HICOPS_RUN_DIR"
SUBDIRS = ("parts", "batches", "results", "psms", "metrics", "comm")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_ptms(text: str) -> tuple[PtmSpec, ...]:
    """``M+15.994915:var,C+57.021464:fixed`` -> PTM specs (kind defaults to var)."""
    out = []
    for item in filter(None, (x.strip() for x in text.split(","))):
        spec, _, kind = item.partition(":")
        kind = kind or "var"
        if kind not in ("var", "fixed"):
            raise ValueError(f"PTM kind must be var or fixed, got {kind!r}")
        out.append(PtmSpec(spec[0], float(spec[1:]), kind == "fixed"))
    return tuple(out)


def format_ptms(ptms: tuple[PtmSpec, ...]) -> str:
    return ",".join(f"{p.target_residue}{p.delta_mass:+.6f}:{'fixed' if p.is_fixed else 'var'}" for p in ptms)


@dataclass
class RunConfig:
    fasta: str = ""
    ms2: str = ""
    run_dir: str = "run"
    run_id: str = "default"
    partitions: int = 1
    transport: str = "in-process"
    cores: int = 2
    # database
    enzyme: str = "trypsin"
    missed_cleavages: int = 2
    min_length: int = 6
    max_length: int = 46
    min_mass: float = 500.0
    max_mass: float = 5000.0
    ptms: str = ""
    max_mods_per_peptide: int = 3
    scatter: str = "round_robin"
    seed: int = 0
    # search
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
    # scheduler
    t_min: float = 0.05
    t_max: float = 2.0
    alpha: float = 0.5
    beta: float = 0.5
    # assembly
    fit: str = "tail"
    tail_min_survival: float = 1.0
    verbose_fit: bool = False
    # runtime
    timeout: float = 120.0
    mapping_max_entries_per_task: float = 48e6
    oracle_budget: int = 50_000_000
    debug_fail_rank: int = -1
    debug_fail_superstep: int = 0

    ALIASES = {"mapping.max_entries_per_task": "mapping_max_entries_per_task", "P": "partitions", "sampling": "sampling_enabled"}

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.partitions < 1:
            raise ConfigError("partitions must be >= 1", "partitions")
        if self.transport not in ("in-process", "multi-process"):
            raise ConfigError(f"unknown transport {self.transport!r}", "transport")
        if self.fit not in ("tail", "gumbel"):
            raise ConfigError(f"unknown fit {self.fit!r}", "fit")
        if self.scatter not in ("round_robin", "random"):
            raise ConfigError(f"unknown scatter {self.scatter!r}", "scatter")
        if self.cores < 2:
            raise ConfigError("cores must be >= 2", "cores")
        try:
            self.database_config()
            self.search_config()
        except (InvalidInputError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def flag_for(cls, key: str) -> str:
        return "--" + key.replace("_", "-")

    @classmethod
    def canonical_key(cls, key: str) -> str:
        key = key.strip()
        key = cls.ALIASES.get(key, key).replace("-", "_").replace(".", "_")
        if key not in cls.keys():
            raise ConfigError(f"unknown config key {key!r}", key)
        return key

    @classmethod
    def coerce(cls, key: str, value: str):
        kind = {f.name: f.type for f in fields(cls)}[key]
        try:
            if kind in (bool, "bool"):
                return parse_bool(value)
            if kind in (int, "int"):
                return int(value)
            if kind in (float, "float"):
                return float(value)
            return value.strip()
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", key) from None

    @classmethod
    def parse(cls, text: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        """Read key=value lines (``#`` comments) and apply ``overrides``."""
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value", None)
            key, value = line.split("=", 1)
            k = cls.canonical_key(key)
            values[k] = cls.coerce(k, value)
        for key, value in (overrides or {}).items():
            k = cls.canonical_key(key)
            values[k] = cls.coerce(k, str(value))
        return cls(**values)

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        text = Path(path).read_text() if path else ""
        cfg = cls.parse(text, overrides)
        if path:
            base = Path(path).resolve().parent
            cfg = replace(cfg, fasta=_resolve_list(cfg.fasta, base), ms2=_resolve_list(cfg.ms2, base))
        return cfg

    def dump(self) -> str:
        lines = []
        for k in self.keys():
            v = getattr(self, k)
            lines.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.keys()}

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def database_config(self) -> DatabaseConfig:
        return DatabaseConfig(
            enzyme=self.enzyme,
            missed_cleavages=self.missed_cleavages,
            len_range=(self.min_length, self.max_length),
            mass_range=(self.min_mass, self.max_mass),
            ptms=parse_ptms(self.ptms),
            max_mods_per_peptide=self.max_mods_per_peptide,
            partitions=self.partitions,
        )

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            delta_m=self.delta_m,
            delta_f=self.delta_f,
            min_shared_peaks=self.min_shared_peaks,
            top_m=self.top_m,
            top_b_peaks=self.top_b_peaks,
            sample_count=self.sample_count,
            batch_cap=self.batch_cap,
            histogram_bins=self.histogram_bins,
            histogram_bin_width=self.histogram_bin_width,
            sampling_enabled=self.sampling_enabled,
        )

    @property
    def fasta_files(self) -> list[str]:
        return [p for p in (x.strip() for x in self.fasta.split(",")) if p]

    @property
    def ms2_files(self) -> list[str]:
        return [p for p in (x.strip() for x in self.ms2.split(",")) if p]

    def run_path(self) -> Path:
        root = os.environ.get(RUN_DIR_ENV) or self.run_dir
        return Path(root) / self.run_id


def _resolve_list(text: str, base: Path) -> str:
    items = [x.strip() for x in text.split(",") if x.strip()]
    return ",".join(str(p if Path(p).is_absolute() else (base / p)) for p in items)


@dataclass
class RunLayout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def create(self) -> "RunLayout":
        for d in SUBDIRS:
            (self.root / d).mkdir(parents=True, exist_ok=True)
        return self

    def __getattr__(self, name: str) -> Path:
        if name in SUBDIRS:
            return self.root / name
        raise AttributeError(name)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_manifest(layout: RunLayout, cfg: RunConfig, extra: dict | None = None) -> Path:
    doc = {
        "version": 1,
        "config": cfg.as_dict(),
        "inputs": {p: file_digest(p) for p in cfg.fasta_files + cfg.ms2_files if Path(p).exists()},
    }
    if extra:
        doc.update(extra)
    layout.manifest.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return layout.manifest


def read_run_manifest(root: str | os.PathLike) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())
