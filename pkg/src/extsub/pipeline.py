"""Checkpoint-level runs: load, unlearn step by step, optionally truncate, save."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .adapter import DEFAULT_CONVENTION, Convention, DeltaModel, assemble, compose_delta, export
from .core import DEFAULT_LAMBDA, Mode, UnlearnConfig, direct_subtract, extract
from .errors import InvalidArgument, InvalidPipeline, IoFailure
from .lowrank import effective_rank, svd_truncate
from .tensor_store import DType, load, save

COMPUTE_DTYPES = {"f64": DType.F64, "f32": DType.F32}
OUT_DTYPES = {"same": None, "f64": DType.F64, "f32": DType.F32, "f16": DType.F16, "bf16": DType.BF16}


@dataclass
class Step:
    mode: Mode
    anti: Path
    lam: float


@dataclass
class Truncation:
    rank: int | None = None  # None: each layer's original expert rank
    max_error: float | None = None  # keep the full delta when the error exceeds this


@dataclass
class LoadOptions:
    compute: DType = DType.F64
    convention: Convention = DEFAULT_CONVENTION
    orientation: str = "auto"
    threads: int | None = 1


@dataclass
class PipelineSpec:
    expert: Path
    steps: list[Step]
    output: Path
    truncate: Truncation | None = None
    compute_dtype: str = "f64"
    out_dtype: str = "same"
    eps: float | None = None
    frozen_expert: bool = False
    axis: int = 0

    def __post_init__(self):
        if not self.steps:
            raise InvalidPipeline("pipeline needs at least one step")
        for i, step in enumerate(self.steps):
            if not step.lam >= 0:
                raise InvalidPipeline(f"step {i}: lambda must be non-negative, got {step.lam}", step=i)
        if self.compute_dtype not in COMPUTE_DTYPES:
            raise InvalidPipeline(f"compute_dtype must be one of {sorted(COMPUTE_DTYPES)}")
        if self.out_dtype not in OUT_DTYPES:
            raise InvalidPipeline(f"out_dtype must be one of {sorted(OUT_DTYPES)}")


def _number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidPipeline(f"{what} must be a number, got {value!r}")
    return float(value)


def parse_pipeline(obj: dict, base_dir: str | os.PathLike = ".") -> PipelineSpec:
    """Validate a decoded pipeline document. Relative paths resolve against ``base_dir``."""
    if not isinstance(obj, dict):
        raise InvalidPipeline("pipeline spec must be a JSON object")
    base = Path(base_dir)
    unknown = set(obj) - {"expert", "steps", "output", "truncate", "compute_dtype", "out_dtype", "eps", "frozen_expert", "axis"}
    if unknown:
        raise InvalidPipeline(f"unknown pipeline fields: {', '.join(sorted(unknown))}")
    for key in ("expert", "output"):
        if not isinstance(obj.get(key), str):
            raise InvalidPipeline(f'"{key}" must be a path string')
    raw_steps = obj.get("steps")
    if not isinstance(raw_steps, list) or not raw_steps:
        raise InvalidPipeline('"steps" must be a non-empty list')

    steps = []
    for i, raw in enumerate(raw_steps):
        if not isinstance(raw, dict) or not isinstance(raw.get("anti"), str):
            raise InvalidPipeline(f'step {i}: needs an "anti" path', step=i)
        try:
            mode = Mode(raw.get("mode", "ext"))
        except ValueError:
            raise InvalidPipeline(f"step {i}: mode must be 'direct' or 'ext'", step=i) from None
        lam = _number(raw.get("lambda", DEFAULT_LAMBDA[mode]), f"step {i} lambda")
        steps.append(Step(mode, base / raw["anti"], lam))

    truncate = None
    if obj.get("truncate") is not None:
        t = obj["truncate"]
        if not isinstance(t, dict):
            raise InvalidPipeline('"truncate" must be an object like {"rank": 16}')
        rank = t.get("rank")
        if rank is not None and (isinstance(rank, bool) or not isinstance(rank, int) or rank < 1):
            raise InvalidPipeline("truncate.rank must be a positive integer")
        max_error = t.get("max_error")
        truncate = Truncation(rank, None if max_error is None else _number(max_error, "truncate.max_error"))

    eps = obj.get("eps")
    return PipelineSpec(
        expert=base / obj["expert"],
        steps=steps,
        output=base / obj["output"],
        truncate=truncate,
        compute_dtype=obj.get("compute_dtype", "f64"),
        out_dtype=obj.get("out_dtype", "same"),
        eps=None if eps is None else _number(eps, "eps"),
        frozen_expert=bool(obj.get("frozen_expert", False)),
        axis=int(obj.get("axis", 0)),
    )


def read_pipeline(path: str | os.PathLike) -> PipelineSpec:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}", path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise InvalidPipeline(f"{path}: invalid JSON: {exc.msg}") from exc
    return parse_pipeline(obj, path.parent)


def load_delta(path: str | os.PathLike, opts: LoadOptions) -> DeltaModel:
    model = assemble(load(path), opts.convention, orientation=opts.orientation, compute=opts.compute)
    return compose_delta(model, threads=opts.threads)


def truncate_model(model: DeltaModel, truncation: Truncation):
    """Factor each layer; returns ``(factors, report)`` for :func:`export`."""
    factors, report = {}, {}
    for key in model.keys():
        delta = model.deltas[key]
        rank = truncation.rank if truncation.rank is not None else model.ranks.get(key)
        if rank is None:
            raise InvalidArgument(
                f"layer {key!r} has no known source rank; pass an explicit truncation rank", layer=key
            )
        result = svd_truncate(delta, rank)
        keep = truncation.max_error is None or result.rel_frobenius_error <= truncation.max_error
        if keep:
            factors[key] = (result.B_out, result.A_out)
        report[key] = {
            "target_rank": rank,
            "rel_frobenius_error": result.rel_frobenius_error,
            "effective_rank_at_1e-6": effective_rank(delta, 1e-6),
            "stored": "factors" if keep else "full",
        }
    return factors, report


def write_model(
    model: DeltaModel,
    output: str | os.PathLike,
    *,
    out_dtype: str = "same",
    convention: Convention = DEFAULT_CONVENTION,
    truncation: Truncation | None = None,
) -> dict | None:
    factors, report = truncate_model(model, truncation) if truncation else (None, None)
    save(export(model, dtype=OUT_DTYPES[out_dtype], convention=convention, factors=factors), output)
    return report


def run_pipeline(
    spec: PipelineSpec,
    *,
    convention: Convention = DEFAULT_CONVENTION,
    orientation: str = "auto",
    threads: int | None = 1,
) -> dict:
    """Apply the steps in order, each result becoming the next step's expert."""
    opts = LoadOptions(COMPUTE_DTYPES[spec.compute_dtype], convention, orientation, threads)
    original = current = load_delta(spec.expert, opts)
    step_reports = []
    for step in spec.steps:
        anti = load_delta(step.anti, opts)
        entry = {"mode": step.mode.value, "anti": str(step.anti), "lambda": step.lam}
        if step.mode is Mode.DIRECT:
            current = direct_subtract(current, anti, step.lam)
        else:
            cfg = UnlearnConfig(step.lam, Mode.EXT, spec.eps, spec.axis)
            against = original if spec.frozen_expert else current
            deficiency, geometry = extract(against, anti, cfg.eps, axis=cfg.axis, threads=threads)
            current = direct_subtract(current, deficiency, cfg.lam)
            entry["degenerate"] = geometry.degenerate_totals()
        step_reports.append(entry)

    truncation = write_model(
        current, spec.output, out_dtype=spec.out_dtype, convention=convention, truncation=spec.truncate
    )
    summary = {"output": str(spec.output), "layers": len(current.deltas), "steps": step_reports}
    if truncation is not None:
        summary["truncation"] = truncation
    return summary


def run_extract(
    expert: str | os.PathLike,
    anti: str | os.PathLike,
    output: str | os.PathLike,
    *,
    compute_dtype: str = "f64",
    out_dtype: str = "same",
    eps: float | None = None,
    axis: int = 0,
    truncation: Truncation | None = None,
    convention: Convention = DEFAULT_CONVENTION,
    orientation: str = "auto",
    threads: int | None = 1,
) -> dict:
    opts = LoadOptions(COMPUTE_DTYPES[compute_dtype], convention, orientation, threads)
    base = load_delta(expert, opts)
    neg = load_delta(anti, opts)
    deficiency, geometry = extract(base, neg, eps, axis=axis, threads=threads)
    deficiency.dtype = base.dtype
    report = write_model(deficiency, output, out_dtype=out_dtype, convention=convention, truncation=truncation)
    summary = {"output": str(output), "layers": len(deficiency.deltas), "degenerate": geometry.degenerate_totals()}
    if report is not None:
        summary["truncation"] = report
    return summary

