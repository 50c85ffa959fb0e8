"""Command-line entry point: ``ptdfcont <subcommand> [--config F] [--out D] [--threads N] [--format F]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import floquet, pipeline
from .config import ConfigError, RunConfig, parse_config, parse_text

SUBCOMMANDS = ("simulate", "continue-experiment", "continue-bvp", "stability-chart", "condition-chart",
               "calibrate", "verify")

EXIT_OK = 0
EXIT_FAIL = 1  # a module raised or a check failed
EXIT_CONFIG = 2
EXIT_LOST = 3  # simulation lost control


def _error(kind: str, message: str) -> None:
    print(f"error: {kind}: {message}", file=sys.stderr)


def _load(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else parse_text("", "<defaults>")
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def cmd_simulate(cfg: RunConfig, out: Path, args) -> int:
    rep = pipeline.simulate(cfg)
    path = out / "trajectory.csv"
    rep.trajectory.to_csv(path, cfg.header("trajectory") + [f"p {rep.p!r}", f"phi0 {rep.phi0!r}",
                                                              f"status {rep.status}"])
    print(f"status: {rep.status}{' (' + rep.reason + ')' if rep.reason else ''}")
    print(f"wrote {path}")
    return EXIT_LOST if rep.status != "ok" else EXIT_OK


def cmd_continue_bvp(cfg: RunConfig, out: Path, args) -> int:
    run = pipeline.oracle_branch(cfg)
    pipeline.save_oracle(run, cfg, out)
    mu = run.fold_orbit.dominant_multiplier
    print(f"fold: p0 = {run.fold_p:.9g} m, avg phase = {run.fold_phase:.9g} rad, mu = {mu:.8f}")
    print(f"wrote {out / pipeline.BVP_BRANCH} ({len(run.branch)} orbits)")
    return EXIT_OK


def cmd_continue_experiment(cfg: RunConfig, out: Path, args) -> int:
    branch = pipeline.experiment_branch(cfg, log=print if args.verbose else None)
    pipeline.save_experiment(branch, cfg, out)
    print(f"{len(branch.points)} points, fold index {branch.fold_index}, stopped: {branch.termination}")
    print(f"wrote {out / pipeline.EXP_BRANCH}")
    return EXIT_OK


def _chart(cfg: RunConfig, out: Path, args, kind: str) -> int:
    run = pipeline.oracle_cached(cfg, out)
    settings = pipeline.chart_settings(cfg)
    interp = run.interpolator()
    if kind == "stability":
        grid = floquet.stability_chart(interp, run.fold_phase, settings, threads=args.threads)
    else:
        grid = floquet.condition_chart(interp, run.fold_phase, settings, tangent=cfg.charts.tangent,
                                       threads=args.threads)
    stem = out / f"{kind}_chart"
    grid.save(stem, cfg.header(f"{kind}-chart"), fmt=args.format)
    print(f"wrote {stem.with_suffix('.csv')} ({grid.values.shape[0]}x{grid.values.shape[1]})")
    return EXIT_OK


def cmd_stability_chart(cfg, out, args) -> int:
    return _chart(cfg, out, args, "stability")


def cmd_condition_chart(cfg, out, args) -> int:
    return _chart(cfg, out, args, "condition")


def cmd_calibrate(cfg: RunConfig, out: Path, args) -> int:
    chosen, records = pipeline.calibrate(cfg, log=print)
    if chosen is None:
        _error("calibration", "no candidate model met the requirements")
        return EXIT_FAIL
    params, rec = chosen
    doc = pipeline.defaults_document(params, rec, cfg.calibrate.p_start)
    path = out / "defaults.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path, args) -> int:
    checks = pipeline.verify(cfg, out)
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.detail}")
    ok = all(c.passed for c in checks)
    print("verify: " + ("all checks passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "simulate": cmd_simulate,
    "continue-experiment": cmd_continue_experiment,
    "continue-bvp": cmd_continue_bvp,
    "stability-chart": cmd_stability_chart,
    "condition-chart": cmd_condition_chart,
    "calibrate": cmd_calibrate,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptdfcont", description=__doc__)
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="configuration file (key = value lines)")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for chart cells")
    ap.add_argument("--format", choices=("wide", "long"), default="wide", help="chart CSV layout")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        _error("config", str(exc))
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    try:
        return COMMANDS[args.subcommand](cfg, out, args)
    except Exception as exc:  # report any module failure as one parseable line
        _error(type(exc).__name__, str(exc))
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
