"""Command-line entry point: ``mfglab <mode> [--config PATH | --fixture NAME] ...``.

Exit codes: 0 success, 2 configuration error, 3 guardrail breach,
4 refusal because the policy set holds no subjective equilibrium.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, EmptyEquilibriumError, GuardrailError, HypothesisError
from .harness import MODES, ExperimentConfig, load_config, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_GUARDRAIL, EXIT_EMPTY = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfglab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", help="experiment configuration (JSON or YAML)")
        src.add_argument("--fixture", help="built-in fixture name, with its preset parameters")
        p.add_argument("--seed", type=int, default=0, help="base seed")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--strict-visitation", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            config = load_config(args.config)
            data = config.to_dict()
            data["mode"] = args.mode
            config = ExperimentConfig.from_dict(data)
        else:
            config = ExperimentConfig.for_fixture(args.fixture or "crowd2_global", mode=args.mode)
        if args.strict_visitation:
            data = config.to_dict()
            data["strict_visitation"] = True
            config = ExperimentConfig.from_dict(data)
        summary = run_experiment(config, args.seed, args.out, args.workers)
    except GuardrailError as exc:
        print(f"guardrail: {exc}", file=sys.stderr)
        return EXIT_GUARDRAIL
    except EmptyEquilibriumError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (ConfigError, HypothesisError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"mode": summary.mode, "out": str(summary.out_dir), **summary.aggregate}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
