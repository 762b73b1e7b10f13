"""Command-line entry point: ``anypredict <step> --config <path> ...``.

Exit codes: 0 success, 2 config error, 3 upstream artifact missing,
4 gateway error, 5 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import errors, pipeline

EXIT_CONFIG = 2
EXIT_ORDER = 3
EXIT_GATEWAY = 4
EXIT_DATA = 5

_GATEWAY_ERRORS = (errors.GatewayError, errors.GatewayTimeout, errors.CacheMiss)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anypredict",
        description="Consolidate tables into text, enrich with valued pseudo-labeled "
        "data, and train/evaluate the classifier.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        return p

    add("consolidate", "step 1: describe and audit every row").add_argument(
        "--seed", type=int, default=None, help="override the config rng_seed"
    )
    add("enrich", "step 2: pseudo-label, score, and select T_sup").add_argument(
        "--seed", type=int, default=None
    )
    train = add("train", "step 3: run the configured regimens and evaluate")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument(
        "--regimen",
        action="append",
        choices=("augment", "finetune", "scratch", "zeroshot"),
        help="override the config regimens (repeatable)",
    )
    zeroshot = add("zeroshot", "hold one dataset out of step 2 and evaluate on it")
    zeroshot.add_argument("--dataset", required=True, help="held-out dataset id")
    zeroshot.add_argument("--seed", type=int, default=None)
    fewshot = add("fewshot", "fine-tune the zero-shot model on small shot draws")
    fewshot.add_argument("--dataset", required=True, help="held-out dataset id")
    fewshot.add_argument(
        "--shots", action="append", type=int, default=None, help="shot count (repeatable)"
    )
    fewshot.add_argument(
        "--seed", action="append", type=int, default=None, help="draw seed (repeatable)"
    )
    add("run", "chain consolidate, enrich, and train").add_argument(
        "--seed", type=int, default=None
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "fewshot":
            config = pipeline.load_config(args.config)
            shots = args.shots if args.shots else [8, 32, 128]
            seeds = args.seed if args.seed else [config.rng_seed]
            result = pipeline.cmd_fewshot_protocol(config, args.dataset, shots, seeds)
            summary = {
                "shots": {
                    str(requested): {
                        "auroc_mean": sum(m.auroc for m in ms) / len(ms),
                        "prauc_mean": sum(m.prauc for m in ms) / len(ms),
                    }
                    for requested, ms in result["per_shot"].items()
                }
            }
            print(json.dumps(summary, indent=2))
            return 0

        config = pipeline.load_config(args.config, seed_override=args.seed)
        if args.command == "consolidate":
            result = pipeline.cmd_consolidate(config)
            print(json.dumps({"n_target": result["n_target"], "n_outdomain": result["n_outdomain"]}))
        elif args.command == "enrich":
            result = pipeline.cmd_enrich(config)
            print(json.dumps({"n_scored": result["n_scored"], "n_selected": result["n_selected"]}))
        elif args.command == "train":
            if args.regimen:
                config = dataclasses.replace(config, regimens=tuple(args.regimen))
            result = pipeline.cmd_train_eval(config)
            summary = {
                regimen: {ds: {"auroc": m.auroc, "prauc": m.prauc} for ds, m in per.items()}
                for regimen, per in result["metrics"].items()
            }
            print(json.dumps(summary, indent=2))
        elif args.command == "zeroshot":
            result = pipeline.cmd_zeroshot_protocol(config, args.dataset)
            m = result["metrics"]
            print(json.dumps({"dataset": args.dataset, "auroc": m.auroc, "prauc": m.prauc}))
        elif args.command == "run":
            manifest = pipeline.run_pipeline(config)
            print(json.dumps(pipeline.manifest_digests(manifest), indent=2))
        return 0
    except errors.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except errors.PipelineOrderError as exc:
        print(f"pipeline order error: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except _GATEWAY_ERRORS as exc:
        print(f"gateway error: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    except errors.ConsolidationAborted as exc:
        gateway_kinds = {"CacheMiss", "GatewayError", "GatewayTimeout"}
        n_gateway = sum(1 for name in exc.failure_types if name in gateway_kinds)
        if n_gateway * 2 > len(exc.failure_types):
            print(f"gateway error: {exc}", file=sys.stderr)
            return EXIT_GATEWAY
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except errors.AnyPredictError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
