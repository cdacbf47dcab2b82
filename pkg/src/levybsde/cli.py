"""Command line runner: ``run``, ``list`` and ``schema``."""

from __future__ import annotations

import argparse
import csv
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import SCHEMA_TEXT, ExperimentConfig, ExperimentSpec, load_config
from .errors import ConfigError, LevyBsdeError
from .experiments import RECIPES, Check, ExperimentContext, ExperimentResult

__all__ = ["main", "run_spec", "run_config", "emit_report"]

CHECK_HEADER = ["check", "value", "lower", "tolerance", "se", "estimate", "target", "verdict"]


def run_spec(spec: ExperimentSpec) -> ExperimentResult:
    """Run one experiment; a library error becomes a single failing ``error`` check."""
    ctx = ExperimentContext(spec.name, spec.model, spec.scheme, spec.steps, spec.paths, spec.seed,
                            spec.params, spec.tolerances)
    try:
        checks, tables = RECIPES[spec.recipe].func(ctx)
    except LevyBsdeError as exc:
        msg = f"error ({type(exc).__name__}): {exc}".replace(",", ";")
        return ExperimentResult(spec.name, spec.recipe, (Check(msg, float("inf"), 0.0),), {})
    return ExperimentResult(spec.name, spec.recipe, tuple(checks), tables)


def run_config(cfg: ExperimentConfig, only=None, parallel=False):
    specs = [s for s in cfg.experiments if not only or s.name in only]
    if parallel and len(specs) > 1:
        with ThreadPoolExecutor() as pool:
            return list(pool.map(run_spec, specs))
    return [run_spec(s) for s in specs]


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _fmt(x):
    if x is None or x == "":
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _metadata(cfg: ExperimentConfig):
    return {"seed": cfg.seed, "git": _git_describe(), "config_sha256": cfg.sha256}


def _write_csv(path: Path, meta: dict, columns_doc: str, header, rows):
    with path.open("w", newline="") as fh:
        for key, val in meta.items():
            fh.write(f"# {key}: {val}\n")
        fh.write(f"# columns: {columns_doc}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _check_row(c):
    return [c.name, c.value, c.lower, c.tolerance, c.se, c.estimate, c.target, "PASS" if c.passed else "FAIL"]


def emit_report(results, cfg: ExperimentConfig, out: Path) -> str:
    """Write ``<experiment>.csv`` (checks), ``<experiment>.<table>.csv`` (details) and ``summary.txt``."""
    meta = _metadata(cfg)
    lines = [f"# {k}: {v}" for k, v in meta.items()]
    n_checks = n_failed = 0
    for res in results:
        emeta = {**meta, "experiment": res.name, "recipe": res.recipe}
        _write_csv(out / f"{res.name}.csv", emeta,
                   "check name, value, lower bound (blank if none), tolerance (upper bound), "
                   "standard error (statistical checks; value is then the z-score), estimate, target, verdict",
                   CHECK_HEADER, [_check_row(c) for c in res.checks])
        for tname, (header, rows) in res.tables.items():
            _write_csv(out / f"{res.name}.{tname}.csv", emeta, ", ".join(header), header, rows)
        lines.append(f"experiment {res.name} ({res.recipe}): {'PASS' if res.passed else 'FAIL'}")
        for c in res.checks:
            n_checks += 1
            n_failed += not c.passed
            parts = [f"value={_fmt(c.value)}", f"tolerance={_fmt(c.tolerance)}"]
            if c.lower is not None:
                parts.insert(1, f"lower={_fmt(c.lower)}")
            if c.se is not None:
                parts.append(f"se={_fmt(c.se)}")
            lines.append(f"  [{'PASS' if c.passed else 'FAIL'}] {c.name}: " + ", ".join(parts))
    lines.append(f"total: {n_checks} checks, {n_failed} failed")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    return text


def _prepare_output(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".write-probe"
    with probe.open("w") as fh:
        fh.write("")
    probe.unlink()


def _cmd_run(args):
    cfg = load_config(args.config)
    only = None
    if args.only:
        only = [n for chunk in args.only for n in chunk.split(",") if n]
        unknown = [n for n in only if n not in cfg.names()]
        if unknown:
            raise ConfigError(f"unknown experiment name(s): {', '.join(unknown)}")
    out = Path(args.out or cfg.output or "results")
    try:
        _prepare_output(out)
    except OSError as exc:
        print(f"error: output directory {out} is not writable: {exc}", file=sys.stderr)
        return 2
    results = run_config(cfg, only, args.parallel)
    text = emit_report(results, cfg, out)
    sys.stdout.write(text)
    failed = [f"{r.name}: {c.name}" for r in results for c in r.checks if not c.passed]
    if failed:
        print("failed checks:\n  " + "\n  ".join(failed), file=sys.stderr)
        return 1
    return 0


def _cmd_list(args):
    cfg = load_config(args.config)
    for s in cfg.experiments:
        rec = RECIPES[s.recipe]
        tol = ", ".join(f"{k}={v:g}" for k, v in s.tolerances.items()) or "3 SE rule only"
        print(f"{s.name} [{s.recipe}] {rec.description}")
        print(f"    steps={s.steps} paths={s.paths} basis={s.scheme.describe()} params={s.params}")
        print(f"    tolerances: {tol}")
    if not cfg.experiments:
        print("(no experiments)")
    return 0


def _cmd_schema(args):
    sys.stdout.write(SCHEMA_TEXT)
    print("\nrecipes:")
    for name, rec in sorted(RECIPES.items()):
        tol = ", ".join(rec.tolerances) or "none"
        print(f"  {name}: {rec.description}\n      params {rec.params}; tolerances: {tol}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="levybsde", description="Run Lévy BSDE experiments from a TOML config.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run experiments and write CSVs plus summary.txt")
    run.add_argument("config")
    run.add_argument("--only", action="append", help="comma-separated experiment names")
    run.add_argument("--out", help="output directory")
    run.add_argument("--parallel", action="store_true", help="run experiments concurrently")
    run.set_defaults(func=_cmd_run)
    lst = sub.add_parser("list", help="print the experiment plan")
    lst.add_argument("config")
    lst.set_defaults(func=_cmd_list)
    sch = sub.add_parser("schema", help="print the config grammar")
    sch.set_defaults(func=_cmd_schema)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
