"""Command-line front end.

Exit codes: 0 success, 2 invalid configuration, 3 a check failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..plant import Trajectory, write_trajectory_csv
from .config import ConfigError, ExperimentConfig
from .runner import (
    build_plant,
    collect_offline_data,
    compare_controllers,
    equivalence_check,
    mc_validate_distribution,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out if args.out is not None else cfg["output"]["dir"])


def cmd_run(args) -> int:
    cfg = _load(args)
    report = run_experiment(cfg, out_dir=_out(args, cfg))
    s = report.summary()
    print(f"{s['controller']}: steps={s['steps']} cost={s['cumulative_cost']:.6g} "
          f"violation_rate={s['violation_rate']:.4f} amount={s['total_violation_amount']:.6g}")
    return EXIT_OK


def cmd_equivalence(args) -> int:
    cfg = _load(args)
    rep = equivalence_check(cfg, tol=args.tol)
    out = _out(args, cfg)
    _dump(rep.to_dict(), out / "equivalence.json")
    if rep.diagnostics:
        for d in rep.diagnostics:
            print(f"assumption violated: {d}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"max relative deviation {rep.max_deviation:.3e} (tol {rep.tolerance:g}): "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_mc_validate(args) -> int:
    cfg = _load(args)
    rep = mc_validate_distribution(cfg, args.samples)
    _dump(rep.to_dict(), _out(args, cfg) / "mc_validate.json")
    print(f"max |z| = {rep.max_z:.3f} over {rep.horizon} steps, M={rep.samples}: "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_compare(args) -> int:
    cfg = _load(args)
    rows = compare_controllers(cfg, workers=args.workers, out_dir=_out(args, cfg))
    for row in rows:
        print(f"{row['Controller']}: rate={row['Violation Rate']:.4f} "
              f"amount={row['Total Violation Amount']:.6g} cost={row['Cumulative Cost']:.6g}")
    return EXIT_OK


def cmd_collect_data(args) -> int:
    cfg = _load(args)
    model = build_plant(cfg)
    data = collect_offline_data(model, cfg)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    traj = Trajectory(None, data.u_d, data.y_d, 0)
    write_trajectory_csv(out / "offline_data.csv", traj, include_state=False)
    print(f"wrote {data.T} samples to {out / 'offline_data.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sddpc", description="Stochastic predictive control experiments."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--seed", type=int, default=None, help="override the base seed")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("run", help="closed-loop simulation of one controller")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("equivalence", help="model-based vs data-driven twin run")
    common(p)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("mc-validate", help="Monte-Carlo check of input/output moments")
    common(p)
    p.add_argument("--samples", type=int, default=100_000)
    p.set_defaults(func=cmd_mc_validate)

    p = sub.add_parser("compare", help="compare several controllers on shared noise")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("collect-data", help="write an offline input/output data CSV")
    common(p)
    p.set_defaults(func=cmd_collect_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
