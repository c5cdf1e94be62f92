"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 calibration failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .app import RunConfig, load_config_file, run
from .errors import ClustinfError

log = logging.getLogger("clustinf")


def _common(p: argparse.ArgumentParser, seed_required: bool = True) -> None:
    p.add_argument("--config", help="JSON file with any of the options below; flags override it")
    p.add_argument("--seed", type=int, help="root seed (required)" if seed_required else "tie-break seed")
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--threads", type=int, help="worker processes (default: logical cores)")
    p.add_argument("--kmax", dest="k_max", type=int, help="largest number of clusters (default ceil(n^(1/3)))")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV with unit_id,period,y,x,w1..wp[,z][,lat,lon]")
    p.add_argument("--locations", help="CSV with unit_id,period,lat,lon")
    p.add_argument("--dissimilarity", help="headerless n x n CSV; default is distance between coordinates")
    p.add_argument("--restarts", type=int, help="k-medoids restarts (default 1)")


def _testing(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", dest="methods", help="im, crs, cce, unit, all, or a comma list (default all)")
    p.add_argument("--alpha", type=float, help="nominal level (default 0.05)")
    p.add_argument("--B", dest="B", type=int, help="simulated copies")
    p.add_argument("--orbit-draws", dest="orbit_draws", type=int,
                   help="Monte Carlo sign draws for CRS when k > 20")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clustinf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="calibrate, test and report on a dataset")
    _common(p)
    _inputs(p)
    _testing(p)
    p.add_argument("--randomized-crs", dest="randomized_crs", type=int, metavar="SEED",
                   help="use the exact-level randomized CRS rule, seeded")
    p.add_argument("--format", choices=["csv", "json"])

    p = sub.add_parser("calibrate", help="emit error grids and the selected level and cluster count")
    _common(p)
    _inputs(p)
    _testing(p)

    p = sub.add_parser("simulate", help="run the Monte Carlo study")
    _common(p)
    _testing(p)
    p.add_argument("--design", help="{ols,iv}x{baseline,sar} (default olsxbaseline)")
    p.add_argument("--units", type=int, choices=[205, 820])
    p.add_argument("--reps", type=int, help="outer replications (default 200)")
    p.add_argument("--locations", help="CSV of district centroids; default is the surrogate layout")

    p = sub.add_parser("diagnose", help="per-k cost, balance and boundary diagnostics")
    _common(p, seed_required=False)
    _inputs(p)
    p.add_argument("--radius", type=float, help="boundary radius (default: median distance / 10)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    verbose = args.pop("verbose")
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    config_path = args.pop("config")
    try:
        file_cfg = load_config_file(config_path) if config_path else None
        cfg = RunConfig.from_sources(command, file_cfg, args)
        run(cfg)
    except ClustinfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
