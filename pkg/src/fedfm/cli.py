"""Command-line entry point: ``fedfm run | compare | check``.

Exit codes: 0 success, 1 a check failed, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from .checks import CHECK_NAMES, run_checks
from .errors import ConfigError, FedFMError, ParseError
from .experiment import atomic_write, execute, load_experiment, preset, summary_line, write_outputs

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("fedfm")

COMPARE_COLUMNS = ["name", "algorithm", "accuracy", "nmi", "silhouette", "total_floats", "handshakes"]


def _load(path):
    exp = load_experiment(path)
    print(f"# config {path} (sha256 {exp.config_hash()[:12]})", file=sys.stderr)
    report = exp.defaults_report()
    if report:
        print("# defaults in effect:\n" + report, file=sys.stderr)
    return exp


def cmd_run(args) -> int:
    exp = _load(args.config)
    outcome = execute(exp)
    out = write_outputs(outcome, args.out)
    print(summary_line(outcome.summary))
    print(f"outputs written to {out}", file=sys.stderr)
    return EXIT_OK


def _unique_names(paths):
    names, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        seen[stem] = seen.get(stem, 0) + 1
        names.append(stem if seen[stem] == 1 else f"{stem}_{seen[stem]}")
    return names


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise ConfigError("compare needs at least two config files")
    exps = [_load(p) for p in args.configs]
    seeds = {int(e.data["seed"]) for e in exps}
    if len(seeds) > 1:
        log.warning("configs use different data seeds %s; the comparison is not on one dataset", sorted(seeds))
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, exp in zip(_unique_names(args.configs), exps):
        outcome = execute(exp)
        write_outputs(outcome, out_root / name)
        s = outcome.summary
        rows.append([name, s["algorithm"], s["best_test_accuracy"], s["nmi"], s["silhouette"], s["total_floats"], s["total_handshakes"]])
        print(summary_line(s), file=sys.stderr)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    w.writerows(rows)
    atomic_write(out_root / "comparison.csv", buf.getvalue())
    print(format_table(rows))
    return EXIT_OK


def format_table(rows) -> str:
    cells = [COMPARE_COLUMNS] + [
        [r[0], r[1], f"{r[2]:.4f}", f"{r[3]:.4f}", f"{r[4]:.4f}", str(r[5]), str(r[6])] for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COMPARE_COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_check(args) -> int:
    exp = _load(args.config) if args.config else preset()
    print("checks: " + ", ".join(CHECK_NAMES))
    results = run_checks(exp.federation, fault=args.inject_fault, grad_instances=args.grad_instances)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: {r.detail} ({r.seconds:.2f}s)")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment file")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several experiment files and tabulate them")
    p.add_argument("configs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("check", help="run the verification suite")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--grad-instances", type=int, default=20)
    p.add_argument("--inject-fault", default=None, choices=CHECK_NAMES, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FedFMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
