"""Command line entry point.

Every command that runs supersteps takes an optional key=value config file
followed by ``--kebab-case`` flags that override single keys.  Exit status
is 0 on success, 1 on a runtime failure and 2 on a usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .assembly import merge_psm_files
from .config import RUN_DIR_ENV, ConfigError, RunConfig, read_run_manifest
from .corpus import CorpusSpec, generate_corpus
from .metrics import read_counters, report
from .runtime.driver import PipelineResult, run_pipeline
from .runtime.mapping import DEFAULT_MAX_ENTRIES_PER_TASK, InsufficientMemory, read_spec, task_mapping
from .verify import compare_psms, load_psms, psm_paths

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

STAGES = {
    "build-db": ((1,), "partition the peptide database and write per-rank manifests"),
    "preprocess": ((2,), "split, preprocess and tag the experimental spectra"),
    "search": ((3,), "search every batch against each rank's partition"),
    "assemble": ((4,), "assemble partial results, compute e-values and write PSMs"),
    "run": ((1, 2, 3, 4), "run all four supersteps end to end"),
}

MERGED_PSMS = "psms.tsv"


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", nargs="?", help="key=value config file")
    group = parser.add_argument_group("config overrides")
    for key in RunConfig.keys():
        group.add_argument(RunConfig.flag_for(key), dest=f"cfg_{key}", metavar="VALUE", default=argparse.SUPPRESS)


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return RunConfig.load(args.config, overrides)


def print_run_summary(result: PipelineResult, steps: tuple[int, ...]) -> None:
    print(f"run directory {result.layout.root}")
    for j in steps:
        walls = [t.wall_seconds for o in result.outcomes for t in o.timings if t.superstep == j]
        if walls:
            print(f"  superstep {j}: {max(walls):10.3f} s over {len(walls)} ranks")
    print(f"  total:       {result.seconds:10.3f} s")
    for o in result.outcomes:
        if not o.ok:
            print(f"  rank {o.rank} failed: {o.error}", file=sys.stderr)


def cmd_stage(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    steps = STAGES[args.command][0]
    result = run_pipeline(cfg, steps=steps)
    print_run_summary(result, steps)
    if not result.ok:
        return EXIT_RUNTIME
    if 4 in steps:
        out = result.layout.root / MERGED_PSMS
        n = merge_psm_files(result.psm_paths(), out)
        print(f"{n} PSMs written to {out}")
    return EXIT_OK


def cmd_map(args: argparse.Namespace) -> int:
    spec = read_spec(args.spec)
    trace: list = []
    try:
        mapping = task_mapping(spec, args.database_size, args.partitions, args.max_entries_per_task, args.entry_bytes, trace)
    except InsufficientMemory as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for k, v in mapping.as_dict().items():
        print(f"{k}={v}")
    if args.trace:
        for t_n, t_c in trace:
            print(f"# step tasks_per_node={t_n} cores_per_task={t_c}")
    return EXIT_OK


def cmd_corpus(args: argparse.Namespace) -> int:
    spec = CorpusSpec(seed=args.seed, proteins=args.proteins, spectra=args.spectra)
    generate_corpus(args.out, spec)
    print(f"corpus written to {Path(args.out) / 'corpus.conf'}")
    return EXIT_OK


def default_root() -> Path:
    return RunConfig().run_path()


def cmd_verify(args: argparse.Namespace) -> int:
    root = Path(args.run) if args.run else default_root()
    manifest = read_run_manifest(root)
    cfg = RunConfig.parse("", {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in manifest["config"].items()})
    budget = args.oracle_budget if args.oracle_budget is not None else cfg.oracle_budget
    counters = read_counters(root / "metrics")
    candidates = sum(c.mu for c in counters)
    if counters and candidates > budget:
        print(
            f"refusing to run the reference search: {candidates} scored candidates exceed the budget of {budget}. "
            "Pass --oracle-budget to raise it, or verify a smaller input.",
            file=sys.stderr,
        )
        return EXIT_RUNTIME
    oracle_root = Path(args.oracle_dir) if args.oracle_dir else root / "oracle"
    oracle_cfg = cfg.with_overrides(partitions=1, sampling_enabled=False, transport="in-process")
    result = run_pipeline(oracle_cfg, root=oracle_root)
    if not result.ok:
        print_run_summary(result, (1, 2, 3, 4))
        return EXIT_RUNTIME
    cmp = compare_psms(load_psms(result.psm_paths()), load_psms(psm_paths(root)))
    print(cmp.summary())
    if cfg.sampling_enabled:
        ok = cmp.within(args.identity, args.max_log10_delta)
        rule = f"identity >= {args.identity:.4g} and |dlog10 e| <= {args.max_log10_delta:g}"
    else:
        ok = cmp.exact
        rule = "identical rows except origin_rank"
    print(f"{'PASS' if ok else 'FAIL'}: {rule}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.run) if args.run else default_root()
    metrics = root / "metrics"
    if not any(metrics.glob("timings_*.tsv")):
        print(f"error: no timing files in {metrics}", file=sys.stderr)
        return EXIT_RUNTIME
    print(report(metrics).summary())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bspsearch", description="Bulk-synchronous peptide database search.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in STAGES.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        add_config_flags(p)
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("map", help="compute tasks per node and cores per task")
    p.add_argument("spec", help="machine description (key=value)")
    p.add_argument("--database-size", type=float, required=True, help="database entries D")
    p.add_argument("--partitions", type=int, required=True, help="parallel tasks P")
    p.add_argument("--max-entries-per-task", type=float, default=DEFAULT_MAX_ENTRIES_PER_TASK)
    p.add_argument("--entry-bytes", type=float, default=1.0)
    p.add_argument("--trace", action="store_true", help="print each adjustment step")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("verify", help="compare a run against a single-rank unsampled reference")
    p.add_argument("run", nargs="?", help=f"run directory (default: from {RUN_DIR_ENV} or the config default)")
    p.add_argument("--oracle-dir", help="where to write the reference run (default: RUN/oracle)")
    p.add_argument("--oracle-budget", type=int, help="maximum scored candidates for the reference run")
    p.add_argument("--identity", type=float, default=0.995)
    p.add_argument("--max-log10-delta", type=float, default=0.5)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("corpus", help="write the deterministic synthetic corpus and its config")
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int, default=CorpusSpec.seed)
    p.add_argument("--proteins", type=int, default=CorpusSpec.proteins)
    p.add_argument("--spectra", type=int, default=CorpusSpec.spectra)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("report", help="print the overhead decomposition of a run")
    p.add_argument("run", nargs="?", help="run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
