"""Command line entry point: one subcommand per experiment.

    fracgirsanov girsanov-identity --seed 7 --samples 20000 --out results
    fracgirsanov run --config exp.ini
    fracgirsanov list

Config files are INI with an ``[experiment]`` section (name, hurst, n, samples,
seed, sigma, drift, x0, functional, tau, out) and an optional
``[tolerances]`` section whose keys override the defaults.  Flags override
the file.  Exit codes: 0 all checks pass, 1 a tolerance failed, 2 usage or
configuration error.
"""

import argparse
import configparser
import sys

from . import registry
from .experiments import (EXPERIMENTS, TOLERANCES, WORKERS_ENV, ConfigError, ExperimentConfig,
                          run_experiment)

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_FIELDS = {"hurst": float, "n": int, "samples": int, "seed": int, "sigma": str, "drift": str,
           "x0": str, "functional": str, "tau": float, "out": str}


def read_config(path):
    """(experiment name or None, field dict, tolerance dict) from an INI file."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    sec = parser["experiment"] if parser.has_section("experiment") else {}
    fields = {}
    for key, value in sec.items():
        if key == "name":
            continue
        if key == "grid":
            key = "n"
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} in [experiment]")
        try:
            fields[key] = _FIELDS[key](value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    tols = {}
    if parser.has_section("tolerances"):
        for key, value in parser["tolerances"].items():
            if key not in TOLERANCES:
                raise ConfigError(f"unknown tolerance key {key!r}")
            try:
                tols[key] = float(value)
            except ValueError:
                raise ConfigError(f"bad tolerance {key} = {value!r}") from None
    return sec.get("name"), fields, tols


def _common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", type=int, dest="n", help="grid cell count n")
    p.add_argument("--samples", type=int, help="Monte Carlo sample count N")
    p.add_argument("--hurst", type=float)
    p.add_argument("--out", help="output directory")
    p.add_argument("--sigma", help="step-process registry key")
    p.add_argument("--drift", help="drift registry key")
    p.add_argument("--x0", help="initial condition: number or functional key")
    p.add_argument("--functional", help="functional registry key")
    p.add_argument("--quiet", action="store_true", help="suppress the per-check table")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fracgirsanov",
        description="Anticipating Girsanov transforms and linear Skorokhod SDEs for fBM.",
        epilog=f"Worker count: set {WORKERS_ENV}.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        _common(sub.add_parser(name, help=f"run the {name} experiment"))
    _common(sub.add_parser("run", help="run the experiment named in --config"))
    sub.add_parser("list", help="list experiments and registry keys")
    return parser


def _listing():
    lines = ["experiments:"] + [f"  {e}" for e in EXPERIMENTS]
    lines += ["step processes (suite):"] + [f"  {k}" for k in registry.SIGMA_SUITE]
    lines += ["functionals (suite):"] + [f"  {k}" for k in registry.FUNCTIONAL_SUITE]
    lines += ["drifts:", "  zero", "  sin", "  lin:<a>", "  sincos@<t>"]
    return "\n".join(lines)


def config_from_args(args):
    name, fields, tols = (None, {}, {})
    if args.config:
        name, fields, tols = read_config(args.config)
    if args.command != "run":
        name = args.command
    if not name:
        raise ConfigError("no experiment named: pass a subcommand or set name in [experiment]")
    for key in ("seed", "n", "samples", "hurst", "out", "sigma", "drift", "x0", "functional"):
        val = getattr(args, key)
        if val is not None:
            fields[key] = val
    return ExperimentConfig(name, tolerances=tols, **fields)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    if args.command == "list":
        print(_listing())
        return EXIT_PASS
    try:
        report = run_experiment(config_from_args(args))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not args.quiet:
        for c in report.checks:
            flag = "PASS" if c.passed else "FAIL"
            print(f"{flag}  {c.name}  value={c.value:.6g}  limit={c.limit:.6g}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{report.config.experiment}: {verdict} -> {report.config.out}")
    return EXIT_PASS if report.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
