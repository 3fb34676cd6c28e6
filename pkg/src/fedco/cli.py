"""Command-line entry point.

Three subcommands: ``run`` executes a configured federated experiment and
writes metrics.csv/summary.json; ``theory`` runs the kernel-eigenvalue
check and the convergence trajectories, writing theorem1.json and
trajectories.csv; ``gradcheck`` runs the finite-difference suite.

Exit codes: 0 success, 1 runtime or check failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .gradcheck import TOLERANCE, run_gradcheck
from .harness import ConfigError, parse_config, run_experiment, worker_count
from .reporting import emit_reports
from .theory import TheoryConfig, train_theory_trajectories, verify_theorem1

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _parse_set(option: str) -> tuple[list[str], object]:
    if "=" not in option:
        raise ConfigError(f"--set expects key=value, got {option!r}")
    key, text = option.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key.split("."), value


def _apply_override(config: dict, path: list[str], value) -> None:
    node = config
    for part in path[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set path {'.'.join(path)!r} does not exist in the config")
        node = nxt
    node[path[-1]] = value


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError("config document must be a JSON object")
        for option in args.set or []:
            path, value = _parse_set(option)
            _apply_override(raw, path, value)
        cfg = parse_config(raw)
        workers = worker_count()
    except (OSError, json.JSONDecodeError, ConfigError, ValueError) as exc:
        print(f"fedco run: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        reports, extra = run_experiment(cfg, workers=workers)
        csv_path, summary_path = emit_reports(reports, args.out, config=cfg.raw,
                                              extra=extra)
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"fedco run: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {csv_path} and {summary_path}")
    return EXIT_OK


def _cmd_theory(args: argparse.Namespace) -> int:
    if not 0.0 < args.alpha <= 1.0:
        print("fedco theory: --alpha must lie in (0, 1]", file=sys.stderr)
        return EXIT_USAGE
    if args.d < 2 or args.m < 2 or args.n < 1 or args.trials < 1:
        print("fedco theory: need --d >= 2, --m >= 2, --n >= 1, --trials >= 1",
              file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = TheoryConfig(n_clients=args.n, samples_per_client=args.m,
                           input_dim=args.d, alpha=args.alpha,
                           mc_samples=args.mc, seed=args.seed)
        cfg.validate()
    except ValueError as exc:
        print(f"fedco theory: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = verify_theorem1(cfg, trials=args.trials)
        trajectories = train_theory_trajectories(cfg, steps=args.steps)
    except Exception as exc:  # noqa: BLE001
        print(f"fedco theory: {exc}", file=sys.stderr)
        return EXIT_FAIL

    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "theorem1.json")
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    traj_path = os.path.join(args.out, "trajectories.csv")
    with open(traj_path, "w", newline="\n") as fh:
        fh.write("step,online_loss,offline_loss,ensemble_loss\n")
        for step in range(len(trajectories.online)):
            fh.write(f"{step},{float(trajectories.online[step])!r},"
                     f"{float(trajectories.offline[step])!r},"
                     f"{float(trajectories.ensemble[step])!r}\n")

    for trial in report.trials:
        status = "ok" if (trial.off_ok and trial.mix_ok) else "FAIL"
        print(f"trial {trial.trial:2d}: lambda_on={trial.lambda_on:.6e} "
              f"lambda_off={trial.lambda_off:.6e} lambda_mix={trial.lambda_mix:.6e} "
              f"[{status}]")
    print(f"wrote {report_path} and {traj_path}")
    if not report.all_passed:
        print("fedco theory: eigenvalue ordering check failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    result = run_gradcheck(seed=args.seed)
    print(f"max relative error {result.max_rel_error:.3e} "
          f"(worst op: {result.worst.op}, config {result.worst.config}); "
          f"tolerance {TOLERANCE:g}")
    if not result.passed:
        print(f"fedco gradcheck: gradient mismatch in op {result.worst.op!r}",
              file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedco",
        description="Federated online/offline cooperation simulator and theory verifier")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a configured federated experiment")
    run_p.add_argument("--config", required=True, help="path to a JSON config")
    run_p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted paths allowed)")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.set_defaults(func=_cmd_run)

    theory_p = sub.add_parser("theory", help="kernel eigenvalue check + trajectories")
    theory_p.add_argument("--n", type=int, default=3, help="number of clients")
    theory_p.add_argument("--m", type=int, default=4, help="samples per client")
    theory_p.add_argument("--d", type=int, default=5, help="input dimension")
    theory_p.add_argument("--alpha", type=float, default=0.5,
                          help="initialization magnitude, in (0, 1]")
    theory_p.add_argument("--mc", type=int, default=100_000,
                          help="Monte-Carlo samples per Gram estimate")
    theory_p.add_argument("--trials", type=int, default=20)
    theory_p.add_argument("--steps", type=int, default=200,
                          help="gradient-descent steps for the trajectories")
    theory_p.add_argument("--seed", type=int, default=0)
    theory_p.add_argument("--out", default=".", help="output directory")
    theory_p.set_defaults(func=_cmd_theory)

    grad_p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    grad_p.add_argument("--seed", type=int, default=0)
    grad_p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
