"""Command-line entry point: ``koopman-rendezvous <subcommand> --config ... --out ...``.

Exit codes: 0 success, 2 configuration or missing-input error, 3 numerical
failure (stage named on stderr), 4 IRLS did not converge (artifacts written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IRLS = 0, 2, 3, 4


def _controllers(values):
    if not values:
        return P.CONTROLLERS
    out = []
    for v in values:
        for c in (P.CONTROLLERS if v == "both" else (v,)):
            if c not in out:
                out.append(c)
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="scenario JSON file, or the name of a bundled scenario (short_field, far_field)")
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the data and observable seeds")
    common.add_argument("--paper-scale", action="store_true",
                        help="n_traj=1000, n_steps=2000, N=500, n_lift=120")
    common.add_argument("--freeze-anomaly", action="store_true", default=None,
                        help="hold the target's true anomaly at its epoch value")
    common.add_argument("--controller", action="append", choices=("koopman", "linear", "both"),
                        help="repeatable; default both")
    common.add_argument("--no-plots", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="koopman-rendezvous", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate random-input training trajectories")
    sub.add_parser("fit", parents=[common], help="fit the lifted linear model from training data")
    sub.add_parser("solve", parents=[common], help="compute control sequences by IRLS")
    sub.add_parser("simulate", parents=[common], help="apply solved controls to the nonlinear plant")
    sub.add_parser("report", parents=[common], help="metrics, report.json and SVG charts")
    sub.add_parser("run", parents=[common], help="all stages in order, reusing a cached model")
    cmp = sub.add_parser("compare", help="aggregate report.json files into a comparison CSV")
    cmp.add_argument("reports", nargs="+", type=Path, help="report.json files or run directories")
    cmp.add_argument("--out", required=True, type=Path, help="CSV path to write")
    return ap


def _dispatch(args) -> int:
    if args.command == "compare":
        paths = [p / P.REPORT_FILE if p.is_dir() else p for p in args.reports]
        for p in paths:
            if not p.exists():
                raise P.MissingArtifactError(f"{p} not found; run the `report` subcommand first")
        print(P.compare(paths, args.out))
        return EXIT_OK

    cfg = load_config(args.config, seed=args.seed, paper_scale=args.paper_scale,
                      freeze_anomaly=args.freeze_anomaly)
    out: Path = args.out
    ctrls = _controllers(args.controller)
    with P.output_lock(out):
        if args.command == "gen-data":
            print(P.gen_data(cfg, out))
        elif args.command == "fit":
            model = P.fit_model(cfg, out)
            print(f"{out / P.MODEL_FILE}: n_lift={model.bank.n_lift} rank={model.training_meta.get('rank')} "
                  f"fit_residual={model.fit_residual:.6g}")
        elif args.command == "solve":
            ok = True
            for c in ctrls:
                s = P.solve_controller(cfg, out, c)
                ok &= bool(s["converged"])
                print(f"{c}: J21={s['fuel_cost_l21']:.6g} iterations={s['iterations']} "
                      f"residual={s['constraint_residual']:.3e} ({s['stop_reason']})")
            return EXIT_OK if ok else EXIT_IRLS
        elif args.command == "simulate":
            for c in ctrls:
                traj = P.simulate(cfg, out, c)
                print(f"{c}: terminal error {P.compute_terminal_error(traj, cfg.x_f):.6g}")
        elif args.command == "report":
            rep = P.report(cfg, out, ctrls, plots=not args.no_plots)
            print(json.dumps({"terminal_error": rep.terminal_error, "fuel_cost": rep.fuel_cost}, indent=1))
            return EXIT_OK if rep.all_converged else EXIT_IRLS
    if args.command == "run":
        rep = P.run_pipeline(cfg, out, ctrls, plots=not args.no_plots)
        print(json.dumps({"terminal_error": rep.terminal_error, "fuel_cost": rep.fuel_cost}, indent=1))
        return EXIT_OK if rep.all_converged else EXIT_IRLS
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (P.MissingArtifactError, P.LockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except P.StageError as exc:
        print(f"numerical failure in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
