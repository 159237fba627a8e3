"""Command line entry point: ``tapfl run | bound | summarize``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .convergence import bound_grid, rhs_increases_with_R
from .experiment.config import MODES, ConfigError, load_config
from .experiment.runner import RunNotFound, emit_metrics, run_config


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, mode=args.mode, seed=args.seed)
    root = Path(args.root) if args.root else cfg.output_dir
    run_id = run_config(cfg, root)
    print(run_id)
    print(root / run_id / "summary.csv")
    return 0


def _cmd_bound(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    b = cfg.raw.get("bound")
    if not b:
        raise ConfigError("config has no 'bound' section")
    points = bound_grid(b["R"], b["sigma"], b["zeta"], b["tau"], int(b["T"]),
                        int(b.get("trials", 20)), int(b.get("block_dim", 4)),
                        int(b.get("clients", 4)), int(b.get("seed", 0)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    with open(out / "bound_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["R", "sigma", "zeta", "tau", "T", "lhs_mean", "lhs_upper", "rhs_mean",
                    "rhs_worst"])
        for p in points:
            reports.append({"R": p.R, "sigma": p.sigma, "zeta": p.zeta, "tau": p.tau,
                            **p.report.to_json()})
            c = p.report.curves
            step = max(1, args.every)
            for k in range(step - 1, len(c["T"]), step):
                w.writerow([p.R, p.sigma, p.zeta, p.tau, int(c["T"][k])]
                           + [f"{c[name][k]:.10g}" for name in
                              ("lhs_mean", "lhs_upper", "rhs_mean", "rhs_worst")])
    summary = {"all_hold": all(p.report.holds for p in points),
               "rhs_increases_with_R": rhs_increases_with_R(points), "points": reports}
    (out / "bound_report.json").write_text(json.dumps(summary, indent=2))
    print(f"{sum(p.report.holds for p in points)}/{len(points)} grid points hold; "
          f"RHS increasing in R: {summary['rhs_increases_with_R']}")
    print(out / "bound_report.json")
    return 0 if summary["all_hold"] else 1


def _cmd_summarize(args: argparse.Namespace) -> int:
    path = emit_metrics(args.run, args.root)
    sys.stdout.write(path.read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tapfl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one configured experiment")
    r.add_argument("--config", default=None,
                   help="YAML file or packaged config name (default, desk)")
    r.add_argument("--mode", choices=MODES, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--root", default=None, help="output directory (default: output_dir)")
    r.set_defaults(func=_cmd_run)

    b = sub.add_parser("bound", help="check the convergence bound on quadratic federations")
    b.add_argument("--config", default=None)
    b.add_argument("--out", default="bound")
    b.add_argument("--every", type=int, default=10, help="write every n-th round to the CSV")
    b.set_defaults(func=_cmd_bound)

    s = sub.add_parser("summarize", help="rewrite and print summary.csv of a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--root", default="runs")
    s.set_defaults(func=_cmd_summarize)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, RunNotFound) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
