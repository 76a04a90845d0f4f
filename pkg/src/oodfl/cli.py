"""Command-line driver: ``oodfl {gen-data,run,solve-semiuot,grad-check}``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .core import (RNG_ALGORITHM, ConfigError, RunConfig, SemiUotConfig, config_from_text,
                   config_to_dict, derive_rng, validate_config)
from .data import DatasetFormatError, gen_synthetic, read_dataset, write_dataset
from .federation import RoundReport, print_report, run
from .gradcheck import run_gradcheck
from .transport import InstanceFormatError, format_plan, parse_instance, semiuot_solve

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "FOCOOP_SEED"
CSV_HEADER = "round,acc,cacc,auroc,fpr95,train_loss"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _num(v) -> str:
    return "" if v is None else format(float(v), ".12g")


def csv_row(r: RoundReport) -> str:
    return ",".join([str(r.round), _num(r.acc), _num(r.cacc), _num(r.auroc),
                     _num(r.fpr95), _num(r.train_loss)])


def format_banks(global_bank, ood_bank) -> str:
    lines = []
    for role, bank in (("global", global_bank), ("ood", ood_bank)):
        lines.append(f"{role} {bank.size} {bank.context_dim}")
        lines.extend(",".join(format(float(v), ".17g") for v in row) for row in bank.contexts)
    return "\n".join(lines) + "\n"


def resolve_seed(flag_seed, cfg_seed: int) -> int:
    """``--seed`` beats the environment variable, which beats the config file."""
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return cfg_seed


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if min(args.classes, args.dim, args.per_class) < 1 or args.ood_classes < 0 or args.shift < 0:
        raise ConfigError("sizes must be positive and --shift nonnegative")
    pool = max(args.pool_size, args.ood_classes)
    ds = gen_synthetic(args.classes, args.ood_classes, args.dim, derive_rng(args.seed, "data"),
                       train_per_class=args.per_class,
                       test_per_class=max(1, args.per_class // 2),
                       ood_per_class=args.per_class, shift_magnitude=args.shift,
                       pool_size=pool)
    write_dataset(ds, args.out)
    return EXIT_OK


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return config_from_text(Path(path).read_text())


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {"seed": resolve_seed(args.seed, cfg.seed)}
    if args.no_bos:
        overrides["enable_bos"] = False
    if args.no_goc:
        overrides["enable_goc"] = False
    cfg = validate_config(dataclasses.replace(cfg, **overrides))
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    dataset = read_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    start = time.perf_counter()
    with open(csv_path, "w") as fh:
        fh.write(CSV_HEADER + "\n")

        def on_round(r):
            print_report(r)
            fh.write(csv_row(r) + "\n")
            fh.flush()

        with np.errstate(over="raise", invalid="raise", divide="raise"):
            result = run(cfg, dataset, threads=args.threads, on_round=on_round)
    (out / "banks.txt").write_text(format_banks(result.global_bank, result.ood_bank))
    final = result.final
    summary = {
        "final": None if final is None else {
            "round": final.round, "acc": final.acc, "cacc": final.cacc,
            "auroc": final.auroc, "fpr95": final.fpr95, "train_loss": final.train_loss},
        "rounds": len(result.history),
        "rng_algorithm": RNG_ALGORITHM,
        "missing_classes": [[t, list(c)] for t, c in result.missing_classes],
        "config": config_to_dict(cfg),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"done in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_solve_semiuot(args) -> int:
    text = sys.stdin.read() if args.instance == "-" else Path(args.instance).read_text()
    cost, a, b, lam = parse_instance(text)
    if not np.isclose(b.sum(), 1.0, rtol=0, atol=1e-9):
        raise InstanceFormatError(f"column weights must sum to 1, got {b.sum():.12g}")
    cfg = SemiUotConfig(lam=lam, max_iters=args.max_iters, step_rule=args.step_rule)
    sys.stdout.write(format_plan(semiuot_solve(cost, a, b, cfg)))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.trials < 1 or args.tol <= 0:
        raise UsageError("--trials must be >= 1 and --tol > 0")
    report = run_gradcheck(args.trials, args.tol, args.seed)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oodfl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic EMBDS dataset")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--ood-classes", type=int, default=5)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--per-class", type=int, default=40, help="training samples per class")
    g.add_argument("--shift", type=float, default=0.5, help="ID-C corruption magnitude")
    g.add_argument("--pool-size", type=int, default=40, help="OOD candidate pool size")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="train and evaluate")
    r.add_argument("--config", help="'section.key = value' file (defaults if omitted)")
    r.add_argument("--data", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--no-bos", action="store_true", help="plain separation loss on clients")
    r.add_argument("--no-goc", action="store_true", help="skip transport calibration")
    r.add_argument("--seed", type=int, help=f"overrides {SEED_ENV} and the config")
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("solve-semiuot", help="solve one transport instance ('-' = stdin)")
    s.add_argument("instance")
    s.add_argument("--max-iters", type=int, default=SemiUotConfig.max_iters)
    s.add_argument("--step-rule", choices=("pairwise", "linesearch", "fixed"),
                   default=SemiUotConfig.step_rule)
    s.set_defaults(func=cmd_solve_semiuot)

    c = sub.add_parser("grad-check", help="finite-difference gradient certification")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetFormatError, InstanceFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
