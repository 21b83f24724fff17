"""Command-line entry point: ``extsub <command> ...``.

Reports go to stdout as JSON with sorted keys. Failures print
``{"code": ..., "message": ...}`` to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .adapter import Convention, assemble
from .core import DEFAULT_LAMBDA, Mode, geometry_stats
from .errors import ExtSubError, InvalidArgument
from .pipeline import (
    COMPUTE_DTYPES,
    OUT_DTYPES,
    LoadOptions,
    PipelineSpec,
    Step,
    Truncation,
    load_delta,
    read_pipeline,
    run_extract,
    run_pipeline,
    write_model,
)
from .tensor_store import load
from .textmetrics import DEFAULT_THRESHOLD, score_file

THREADS_ENV = "EXTSUB_THREADS"
USAGE_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"code": "usage", "message": message}, sort_keys=True), file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def resolve_threads(flag: int | None) -> int:
    if flag is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                flag = int(env)
            except ValueError:
                raise InvalidArgument(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        else:
            flag = os.cpu_count() or 1
    if flag < 1:
        raise InvalidArgument(f"thread count must be positive, got {flag}")
    return flag


def _convention(args) -> Convention:
    return Convention(args.suffix_b, args.suffix_a, args.suffix_delta)


def _truncation(args) -> Truncation | None:
    if args.truncate is None:
        return None
    return Truncation(args.truncate or None, args.max_error)


def _add_common(p: argparse.ArgumentParser, *, out: bool = True) -> None:
    p.add_argument("--compute-dtype", choices=sorted(COMPUTE_DTYPES), default="f64")
    if out:
        p.add_argument("--out-dtype", choices=list(OUT_DTYPES), default="same")
    p.add_argument("--eps", type=float, default=None, help="degeneracy threshold (default 1e-12 f64, 1e-6 f32)")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or CPU count)")
    p.add_argument("--suffix-b", default=".lora_B.weight")
    p.add_argument("--suffix-a", default=".lora_A.weight")
    p.add_argument("--suffix-delta", default=".lora_delta.weight")
    p.add_argument("--orientation", choices=["auto", "standard", "transposed"], default="auto")


def _add_truncate(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--truncate",
        nargs="?",
        type=int,
        const=0,
        default=None,
        metavar="RANK",
        help="store SVD factors; without RANK uses each layer's original rank",
    )
    p.add_argument("--max-error", type=float, default=None, help="store the full delta where truncation error exceeds this")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="extsub", description="Arithmetic on LoRA adapters: direct subtraction and Ext-Sub.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("subtract", help="expert minus lambda * (anti-expert or its deficiency)")
    p.add_argument("--expert", required=True)
    p.add_argument("--anti", required=True)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.EXT.value)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="default 1.0 for ext, 0.2 for direct")
    p.add_argument("--axis", type=int, choices=[0, 1], default=0)
    p.add_argument("-o", "--output", required=True)
    _add_common(p)
    _add_truncate(p)

    p = sub.add_parser("extract", help="write the anti-expert's deficiency relative to the expert")
    p.add_argument("--expert", required=True)
    p.add_argument("--anti", required=True)
    p.add_argument("--axis", type=int, choices=[0, 1], default=0)
    p.add_argument("-o", "--output", required=True)
    _add_common(p)
    _add_truncate(p)

    p = sub.add_parser("compose", help="run a JSON pipeline of unlearning steps")
    p.add_argument("pipeline")
    p.add_argument("--frozen-expert", action="store_true", help="extract every step against the original expert")
    _add_common(p)
    # flags given here override the pipeline file; defaults defer to it
    p.set_defaults(compute_dtype=None, out_dtype=None)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("path")
    _add_common(p, out=False)

    p = sub.add_parser("stats", help="row geometry between expert and anti-expert")
    p.add_argument("--expert", required=True)
    p.add_argument("--anti", required=True)
    p.add_argument("--axis", type=int, choices=[0, 1], default=0)
    _add_common(p, out=False)

    p = sub.add_parser("truncate", help="re-factorize a checkpoint's deltas by truncated SVD")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--rank", type=int, default=None, help="default: each layer's original rank")
    p.add_argument("--max-error", type=float, default=None)
    _add_common(p)

    p = sub.add_parser("repn", help="n-gram repetition of generated texts")
    p.add_argument("path")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--format", choices=["auto", "lines", "jsonl"], default="auto")
    return parser


def _load_opts(args, threads: int) -> LoadOptions:
    return LoadOptions(COMPUTE_DTYPES[args.compute_dtype], _convention(args), args.orientation, threads)


def cmd_subtract(args) -> dict:
    mode = Mode(args.mode)
    lam = DEFAULT_LAMBDA[mode] if args.lam is None else args.lam
    spec = PipelineSpec(
        expert=args.expert,
        steps=[Step(mode, args.anti, lam)],
        output=args.output,
        truncate=_truncation(args),
        compute_dtype=args.compute_dtype,
        out_dtype=args.out_dtype,
        eps=args.eps,
        axis=args.axis,
    )
    summary = run_pipeline(
        spec, convention=_convention(args), orientation=args.orientation, threads=resolve_threads(args.threads)
    )
    (step,) = summary.pop("steps")
    summary.update(mode=step["mode"], **{"lambda": step["lambda"]})
    if "degenerate" in step:
        summary["degenerate"] = step["degenerate"]
    return summary


def cmd_extract(args) -> dict:
    return run_extract(
        args.expert,
        args.anti,
        args.output,
        compute_dtype=args.compute_dtype,
        out_dtype=args.out_dtype,
        eps=args.eps,
        axis=args.axis,
        truncation=_truncation(args),
        convention=_convention(args),
        orientation=args.orientation,
        threads=resolve_threads(args.threads),
    )


def cmd_compose(args) -> dict:
    spec = read_pipeline(args.pipeline)
    if args.frozen_expert:
        spec.frozen_expert = True
    if args.eps is not None:
        spec.eps = args.eps
    if args.compute_dtype is not None:
        spec.compute_dtype = args.compute_dtype
    if args.out_dtype is not None:
        spec.out_dtype = args.out_dtype
    return run_pipeline(
        spec, convention=_convention(args), orientation=args.orientation, threads=resolve_threads(args.threads)
    )


def cmd_inspect(args) -> dict:
    store = load(args.path)
    model = assemble(store, _convention(args), orientation=args.orientation, compute=COMPUTE_DTYPES[args.compute_dtype])
    return {
        "path": args.path,
        "tensors": {
            name: {"dtype": store[name].dtype.value, "shape": list(store[name].shape)} for name in store.names()
        },
        "layers": {
            key: {"rank": layer.rank, "shape": list(layer.shape)} for key, layer in sorted(model.layers.items())
        },
        "full_layers": {key: list(mat.shape) for key, mat in sorted(model.full.items())},
        "passthrough": sorted(model.passthrough),
        "metadata": dict(store.metadata),
    }


def cmd_stats(args) -> dict:
    threads = resolve_threads(args.threads)
    opts = _load_opts(args, threads)
    report = geometry_stats(load_delta(args.expert, opts), load_delta(args.anti, opts), args.eps, axis=args.axis, threads=threads)
    out = report.to_dict()
    out["degenerate"] = report.degenerate_totals()
    return out


def cmd_truncate(args) -> dict:
    threads = resolve_threads(args.threads)
    model = load_delta(args.input, _load_opts(args, threads))
    report = write_model(
        model,
        args.output,
        out_dtype=args.out_dtype,
        convention=_convention(args),
        truncation=Truncation(args.rank, args.max_error),
    )
    return {"output": args.output, "layers": len(model.deltas), "truncation": report}


def cmd_repn(args) -> dict:
    if args.n < 1:
        raise InvalidArgument(f"--n must be >= 1, got {args.n}")
    score = score_file(args.path, args.n, fmt=args.format)
    out = score.summary(args.threshold)
    out["threshold"] = args.threshold
    out["mean_over_threshold"] = score.mean >= args.threshold
    return out


COMMANDS = {
    "subtract": cmd_subtract,
    "extract": cmd_extract,
    "compose": cmd_compose,
    "inspect": cmd_inspect,
    "stats": cmd_stats,
    "truncate": cmd_truncate,
    "repn": cmd_repn,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _emit(COMMANDS[args.command](args))
    except ExtSubError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
