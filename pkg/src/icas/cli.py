"""``icas`` command line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 partition breach,
4 numeric failure, 1 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import KINDS, ConfigError, load_config
from .experiments import emit_outputs, run_experiment, thread_cap
from .numerics import NonFiniteError
from .training import CheckpointError, PartitionBreach

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_PARTITION, EXIT_NUMERIC = 0, 1, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icas", description="Run an ICAS experiment from a config file.")
    parser.add_argument("experiment", choices=KINDS)
    parser.add_argument("--config", required=True, help="INI experiment config")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--alpha", type=float, default=None, help="style blend weight in [0, 1]")
    parser.add_argument("--gamma", type=float, default=None, help="structure residual scale (>= 0)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.kind != args.experiment:
            raise ConfigError(f"config declares kind {cfg.kind!r} but the command is {args.experiment!r}")
        cfg = cfg.override(seed=args.seed, out=args.out, alpha=args.alpha, gamma=args.gamma)
        thread_cap()
        report = run_experiment(cfg)
        emit_outputs(report, args.out)
    except (ConfigError, CheckpointError) as exc:
        print(f"icas: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PartitionBreach as exc:
        print(f"icas: partition breach: {exc}", file=sys.stderr)
        return EXIT_PARTITION
    except NonFiniteError as exc:
        print(f"icas: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"icas: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps({v: {k: s[k] for k in sorted(s) if k.startswith(("mean_", "final_"))} for v, s in report.variants.items()}, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
