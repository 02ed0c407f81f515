"""Command line: ``locmoment <kind> --config PATH``, ``locmoment sweep``, ``locmoment verify``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .errors import ConfigError, NumericalError
from .harness import KINDS, ExperimentConfig, run, sweep, verify

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError:
            try:
                out.append(float(tok))
            except ValueError:
                raise ConfigError(f"values: {tok!r} is not numeric") from None
    return out


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    data = cfg.to_dict()
    if getattr(args, "kind", None) and args.kind != cfg.kind:
        raise ConfigError(f"kind: command {args.kind!r} does not match config kind {cfg.kind!r}")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["output"] = args.out
    if args.workers is not None:
        data["workers"] = args.workers
    return ExperimentConfig.from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="locmoment", description="Fractional-moment localization experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for kind in KINDS:
        k = sub.add_parser(kind, help=f"run a {kind} experiment")
        k.add_argument("--config", required=True)
        k.add_argument("--seed", type=int)
        k.add_argument("--out")
        k.add_argument("--workers", type=int)
        k.set_defaults(kind=kind)
    s = sub.add_parser("sweep", help="run one experiment per value of a numeric config field")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    v = sub.add_parser("verify", help="re-hash the embedded configs of result files")
    v.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            results = verify(args.out)
            for name, ok, msg in results:
                print(f"{'OK  ' if ok else 'FAIL'} {name}: {msg}")
            return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CONFIG
        cfg = _load(args)
        if args.command == "sweep":
            table = sweep(cfg, args.axis, _parse_values(args.values))
        else:
            table = run(cfg)
        print(f"{cfg.kind}: {len(table.rows)} rows written to {cfg.output}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
