"""magneto-bo: run, scan-h and validate experiment configs.

Exit codes: 0 all assertions pass, 1 an assertion failed, 2 config error,
3 numerical precondition failure (gap, contour, resolution).
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
import time

import matplotlib
import numpy as np
import scipy
import scipy.fft
import sympy
import yaml

from . import __version__, fieldio
from .config import ConfigError, config_hash, load
from .experiments import PRECONDITION_ERRORS, check_assertions_supported, export, make_model, run, tensor_grid

log = logging.getLogger("magneto_bo")

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_PRECONDITION = 0, 1, 2, 3


def versions():
    return {
        "magneto_bo": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "sympy": sympy.__version__,
        "matplotlib": matplotlib.__version__,
        "pyyaml": yaml.__version__,
    }


def _output_dir(cfg, override):
    if override:
        return override
    if cfg.get("output_dir"):
        return cfg["output_dir"]
    return os.path.join("runs", cfg["name"])


def _write_config(directory, cfg):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "config.resolved.yaml")
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    return path


def validate_config(cfg):
    """Dry-run checks: assertions fit the kind, the model builds, the tensor grid fits the budget."""
    check_assertions_supported(cfg)
    model = make_model(cfg)
    if cfg["kind"] in ("propagate-grid", "compare", "straight-line") or (
        cfg["kind"] == "scan-h" and cfg["pipeline"]["leakage"] and model.pathway == "matrix"
    ):
        grid = tensor_grid(cfg, model)
        return {"model": type(model).__name__, "tensor_points": grid.size}
    return {"model": type(model).__name__}


def execute(cfg, output_dir, threads=None, figures=True):
    """Run one experiment and write its report; returns the exit code."""
    directory = _output_dir(cfg, output_dir)
    _write_config(directory, cfg)
    meta = {
        "name": cfg["name"],
        "kind": cfg["kind"],
        "config_hash": config_hash(cfg),
        "versions": versions(),
        "threads": threads,
    }
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        with scipy.fft.set_workers(threads or 1):
            report = run(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        meta.update(status="config error", error=str(exc))
        code = EXIT_CONFIG
    except PRECONDITION_ERRORS as exc:
        log.error("numerical precondition failed: %s: %s", type(exc).__name__, exc)
        meta.update(status="precondition failure", error=f"{type(exc).__name__}: {exc}")
        code = EXIT_PRECONDITION
    if code != EXIT_OK:
        meta["wall_time"] = time.perf_counter() - t0
        fieldio.write_json(os.path.join(directory, "metadata.json"), meta)
        fieldio.write_index(directory, [])
        return code
    entries = export(report, directory, figures=figures)
    meta.update(
        status="pass" if report.passed else "assertion failure",
        metrics=report.metrics,
        checks=report.checks,
        notes=report.notes,
        artifacts=len(entries),
        wall_time=time.perf_counter() - t0,
    )
    fieldio.write_json(os.path.join(directory, "metadata.json"), meta)
    for c in report.checks:
        log.info("%s %s = %s (threshold %s)", "PASS" if c["passed"] else "FAIL", c["name"], c["value"], c["threshold"])
    return EXIT_OK if report.passed else EXIT_ASSERT


def build_parser():
    ap = argparse.ArgumentParser(prog="magneto-bo", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run the experiment described by a config file"),
                       ("scan-h", "convergence scan over pipeline.h_list"),
                       ("validate", "check a config without running it")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--threads", type=int, default=None, help="FFT worker threads")
        p.add_argument("--no-figures", action="store_true")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load(args.config)
        if args.command == "scan-h":
            cfg["kind"] = "scan-h"
            if not cfg["pipeline"]["h_list"]:
                raise ConfigError("scan-h needs pipeline.h_list")
        check_assertions_supported(cfg)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        try:
            info = validate_config(cfg)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except PRECONDITION_ERRORS as exc:
            print(f"precondition failure: {exc}", file=sys.stderr)
            return EXIT_PRECONDITION
        except ValueError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"ok: {cfg['kind']} ({config_hash(cfg)}) {info}")
        return EXIT_OK
    code = execute(cfg, args.output_dir, args.threads, figures=not args.no_figures)
    print({0: "pass", 1: "assertion failure", 2: "config error", 3: "precondition failure"}[code])
    return code


if __name__ == "__main__":
    sys.exit(main())
