"""``oed-dino`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import ConfigError, ContainerError, DimensionError, NonConvergenceError, ParameterDomainError

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4

COMMANDS = {
    "gen-data": pipeline.gen_data,
    "reduce": pipeline.reduce,
    "train": pipeline.train_models,
    "map": pipeline.map_points,
    "criteria": pipeline.criteria,
    "design": pipeline.design,
    "verify": pipeline.verify,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oed-dino", description="Sensor placement with derivative-informed neural surrogates.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--backend", choices=("hifi", "surrogate"))
    p.add_argument("--a-opt", dest="a_opt", choices=("simplified", "weighted"))
    p.add_argument("--warmstart", metavar="adam:ITERS:LR")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = load_config(args.config)
        if args.warmstart is not None:
            cfg.values["oed.warmstart"] = args.warmstart
            pipeline.validate_config(cfg)
        opts = pipeline.Options(args.out, args.workers, args.backend, args.a_opt, args.warmstart)
        result = COMMANDS[args.command](cfg, opts)
    except (ConfigError, ParameterDomainError, DimensionError, ContainerError) as exc:
        print(f"oed-dino: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonConvergenceError as exc:
        print(f"oed-dino: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if args.command == "verify":
        for c in result:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name} value={c.value:.3e} tol={c.tol:.1e}")
        return EXIT_OK if all(c.passed for c in result) else EXIT_VERIFY
    print(result if not isinstance(result, dict) else " ".join(str(v) for v in result.values()))
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
