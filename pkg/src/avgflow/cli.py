"""Command-line entry point: ``python3 -m avgflow.cli <command> --config cfg.yaml --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 missing artifact.
"""

import argparse
import os
import sys

THREAD_ENV = "AVGFLOW_THREADS"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

COMMANDS = ("run", "simulate", "train-mle", "train-vi", "baseline", "evaluate", "compare-laws",
            "reproduce-table1", "schema", "show-config")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4


def build_parser():
    p = argparse.ArgumentParser(prog="avgflow", description="Averaged-drift learning experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML config; stage commands fall back to DIR/config.snapshot")
    p.add_argument("--out", help="artifact directory ('run' creates a timestamped sub-directory here)")
    p.add_argument("--seed", type=int, help="master seed, overrides seeds.master")
    p.add_argument("--threads", type=int, help=f"BLAS/OpenMP threads (default: ${THREAD_ENV})")
    p.add_argument("--identical", action="store_true",
                   help="compare-laws: use the true drift for both systems (sanity check, all zeros)")
    return p


def _set_threads(n):
    if n is None:
        env = os.environ.get(THREAD_ENV)
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ValueError(f"thread count must be >= 1, got {n}")
        for var in THREAD_VARS:
            os.environ[var] = str(n)


def _load(args):
    from .config import ExperimentConfig, load_config
    from .errors import ConfigError, MissingArtifactError

    if args.config:
        cfg = load_config(args.config)
    elif args.command == "schema":
        cfg = ExperimentConfig.from_dict({})
    elif args.out and os.path.exists(os.path.join(args.out, "config.snapshot")):
        cfg = load_config(os.path.join(args.out, "config.snapshot"))
    elif args.command in ("run", "reproduce-table1", "show-config", "simulate"):
        raise ConfigError("--config is required")
    else:
        raise MissingArtifactError(f"no --config given and {os.path.join(args.out or '.', 'config.snapshot')} "
                                   "does not exist")
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        data = cfg.to_dict()
        data["seeds"]["master"] = args.seed
        cfg = ExperimentConfig.from_dict(data)
    return cfg


def _dispatch(args):
    import json

    from . import pipeline
    from .config import schema
    from .errors import ConfigError

    cfg = _load(args)
    if args.command == "schema":
        print(json.dumps(schema(), indent=2))
        return
    if args.command == "show-config":
        print(cfg.dump_yaml(), end="")
        return
    if not args.out:
        raise ConfigError("--out is required")
    if args.command == "run":
        root = pipeline.run_experiment(cfg, args.out)
        print(root)
        return
    if args.command == "reproduce-table1":
        for row in pipeline.reproduce_table1(cfg, args.out):
            print(",".join(str(v) for v in row))
        return
    art = pipeline.Artifacts(args.out, cfg)
    kwargs = {"identical": True} if args.command == "compare-laws" and args.identical else {}
    result = pipeline.run_stage(args.command, art, **kwargs)
    if isinstance(result, dict):
        print(json.dumps(result, sort_keys=True))


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _set_threads(args.threads)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .errors import ConfigError, MissingArtifactError, NumericError

    try:
        _dispatch(args)
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
