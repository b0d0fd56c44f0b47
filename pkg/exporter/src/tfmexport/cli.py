"""Command line: export one prediction cache per invocation."""
from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportJob, export_cache
from .models import ModelError, available_models


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tfm-export",
        description="Run an in-context model fold-by-fold and write a "
                    "prediction cache for the distillation engine",
    )
    parser.add_argument("--model", default="stub",
                        help=f"model id, one of {available_models()}")
    parser.add_argument("--matrix", required=True,
                        help="preprocessed-matrix CSV from the engine's split command")
    parser.add_argument("--fold-plan", required=True,
                        help="fold-plan CSV from the engine's split command")
    parser.add_argument("--output", required=True, help="cache file to write")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--leaky", action="store_true",
                        help="demonstration mode: condition on the FULL dataset "
                             "and score in-context (produces leaky labels)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        matrix_path=args.matrix,
        fold_plan_path=args.fold_plan,
        output_path=args.output,
        model_id=args.model,
        device=args.device,
        seed=args.seed,
        leaky=args.leaky,
    )
    try:
        path = export_cache(job)
    except (ExportError, ModelError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    mode = "full-context (leaky)" if args.leaky else "out-of-fold"
    print(f"wrote {path} ({mode}, model={args.model})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
