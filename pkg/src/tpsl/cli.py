"""Command line entry point.

Exit codes: 0 success, 1 bad arguments or invalid configuration/data,
2 failure while running.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .data import DataError, gen_synthetic, write_csv
from .perturb import MechanismError, canonical_kind, mech_for_epsilon
from .protocol import ProtocolError, Transcript

VALIDATION_ERRORS = (harness.ConfigError, MechanismError, DataError, ProtocolError, IndexError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    mech = harness.point_mechanism(args.mech, args.eps, args.sigma)
    seed = harness.point_seed(cfg.master_seed, 0, args.rep)
    rec = harness.run_point(cfg, mech, args.rep, seed, transcript_out=args.transcript)
    print(rec.to_json())
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    result = harness.sweep(cfg, out_dir=args.out, workers=args.workers)
    for row in harness.summarize(result.records):
        eps = "" if row["eps"] is None else f" eps={row['eps']:g}"
        sigma = "" if row["sigma"] is None else f" sigma={row['sigma']:g}"
        print(f"{row['mechanism']}{eps}{sigma}: test {row['test_auc']:.4f}  NA {row['na_auc']:.4f}  "
              f"SA {row['sa_auc']:.4f}  SDA {row['sda_auc']:.4f}")
    print(f"wrote {len(result.files)} files to {result.out_dir}")
    return 0


def cmd_dpcheck(args) -> int:
    rows = harness.dpcheck(args.mech, args.eps, args.trials, seed=args.seed or 0,
                           mechanism_eps=args.mech_eps, classes=args.classes)
    print(harness.format_dp_table(rows))
    return 0 if all(r.passed for r in rows) else 2


def cmd_couplingcheck(args) -> int:
    mech = None if args.variant == "vanilla" else mech_for_epsilon(args.mech, args.eps)
    report = harness.couplingcheck(args.variant, mech, n=args.n, batches=args.batches, seed=args.seed or 0,
                                   flip_indices=args.flip)
    print(report.describe())
    if report.failures and not report.expected_fail:
        print(f"failed flip indices: {list(report.failures)}")
    return 0 if report.ok else 2


def cmd_dump_transcript(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise harness.ConfigError(f"no such transcript: {path}")
    print(Transcript.from_bytes(path.read_bytes()).describe())
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = cfg.data.synthetic
    overrides = {k: getattr(args, k) for k in ("n", "prior", "separation") if getattr(args, k) is not None}
    spec = replace(spec, **overrides)
    ds = gen_synthetic(spec, cfg.master_seed)
    write_csv(ds, args.out, with_ids=args.with_ids)
    print(f"wrote {len(ds)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tpsl", description="Split learning with label-DP gradient perturbation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")

    p = sub.add_parser("train", help="one training run; prints a metrics record")
    common(p)
    p.add_argument("--mech", default="laplace", type=canonical_kind)
    p.add_argument("--eps", type=float)
    p.add_argument("--sigma", type=float, help="Gaussian baseline scale")
    p.add_argument("--rep", type=int, default=0)
    p.add_argument("--transcript", help="write the binary transcript here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run the configured grid and write artifacts")
    common(p)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dpcheck", help="audit a mechanism's epsilon")
    common(p, config=False)
    p.add_argument("--mech", required=True, type=canonical_kind)
    p.add_argument("--eps", type=float, nargs="+", required=True)
    p.add_argument("--mech-eps", type=float, nargs="+",
                   help="build the mechanism for these epsilons instead of the claimed ones")
    p.add_argument("--trials", type=int, default=1_000_000)
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(func=cmd_dpcheck)

    p = sub.add_parser("couplingcheck", help="neighbouring-label coupling test on a small dataset")
    common(p, config=False)
    p.add_argument("--variant", default="tpsl", choices=["vanilla", "tpsl", "tpsl-last-hidden"])
    p.add_argument("--mech", default="laplace", type=canonical_kind)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--flip", type=int, nargs="+", help="flip indices (default: all)")
    p.set_defaults(func=cmd_couplingcheck)

    p = sub.add_parser("dump-transcript", help="print a binary transcript in readable form")
    p.add_argument("path")
    p.set_defaults(func=cmd_dump_transcript)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--prior", type=float)
    p.add_argument("--separation", type=float)
    p.add_argument("--with-ids", action="store_true")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except harness.PointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
