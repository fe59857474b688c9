"""Command-line entry point: run, sweep, ablate, diag, report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config, parse_config
from .diag import DEFAULT_ETAS, format_battery, run_theory_battery
from .report import build_report
from .runner import HarnessError, cli_ablate, cli_run, cli_sweep


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config (YAML)")
    p.add_argument("--output-dir", default=None,
                   help="run directory root (default: config output_dir, then "
                        "OPRLAB_OUTPUT_DIR, then ./runs)")
    p.add_argument("--seed", type=int, action="append", default=None, dest="seeds",
                   help="override config seeds; repeatable")
    p.add_argument("--workers", type=int, default=None, help="parallel jobs")
    p.add_argument("--overwrite", action="store_true",
                   help="allow clearing a non-empty run directory")
    p.add_argument("--name", default=None, help="run subdirectory name (default: command)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oprlab",
        description="continual-learning experiments on tiny autoregressive policies")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every configured method over every seed")
    _add_common(p)

    p = sub.add_parser("sweep", help="replay budget sweep over the configured rho list")
    _add_common(p)
    p.add_argument("--rho", type=float, action="append", default=None, dest="rho_list",
                   help="override config rho_list; repeatable")

    p = sub.add_parser("ablate", help="selection-direction ablation (top vs bottom scores)")
    _add_common(p)
    p.add_argument("--rho", type=float, default=0.10, help="replay fraction (default 0.10)")

    p = sub.add_parser("diag", help="numerical verification battery on a tiny exact model")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eta", type=float, action="append", default=None, dest="etas",
                   help="step sizes for the one-step bound; repeatable")

    p = sub.add_parser("report", help="render figures and tables from a finished run")
    p.add_argument("run_dir", help="directory holding a runrecord.json")
    p.add_argument("--output-dir", default=None,
                   help="where to write the bundle (default: <run_dir>/report)")
    return parser


def _run_dir(cfg, args, default_name: str) -> Path:
    root = cfg.resolve_output_dir(args.output_dir)
    return root / (args.name or default_name)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            record = cli_run(cfg, _run_dir(cfg, args, "run"), seeds=args.seeds,
                             workers=args.workers, overwrite=args.overwrite)
            print(f"run complete: {len(record['methods'])} methods, "
                  f"seeds {record['seeds']}, content {record['content_hash'][:12]}")
            for tag in sorted(record["methods"]):
                a = record["methods"][tag]["aggregate"]
                b = "n/a" if a["bwt_mean"] is None else f"{a['bwt_mean']:+.2f}"
                print(f"  {tag:<24} acc {a['acc_mean']:6.2f}  bwt {b}")
        elif args.command == "sweep":
            cfg = load_config(args.config)
            record = cli_sweep(cfg, _run_dir(cfg, args, "sweep"), rho_list=args.rho_list,
                               seeds=args.seeds, workers=args.workers,
                               overwrite=args.overwrite)
            print(f"sweep complete over rho {record['rho_list']}")
            for name, mono in sorted(record["acc_monotone_in_rho"].items()):
                print(f"  {name}: accuracy monotone in rho: {mono}")
        elif args.command == "ablate":
            cfg = load_config(args.config)
            record = cli_ablate(cfg, _run_dir(cfg, args, "ablate"), rho=args.rho,
                                seeds=args.seeds, workers=args.workers,
                                overwrite=args.overwrite)
            print(f"ablation complete at rho {record['rho']}")
            for check, ok in record["ordering"].items():
                print(f"  {check}: {ok}")
        elif args.command == "diag":
            out = Path(args.output_dir or "runs/diag")
            summary = run_theory_battery(out, seed=args.seed,
                                         etas=args.etas or DEFAULT_ETAS)
            print(format_battery(summary))
            print(f"artifacts in {out}")
            return 0 if summary.all_ok else 1
        elif args.command == "report":
            out = build_report(Path(args.run_dir),
                               Path(args.output_dir) if args.output_dir else None)
            print(f"report bundle in {out}")
    except (ConfigError, HarnessError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
