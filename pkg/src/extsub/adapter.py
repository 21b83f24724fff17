"""Pair LoRA factors into layers, compose delta matrices, export results."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import KeySetMismatch, OrientationAmbiguous, RankMismatch, ShapeMismatch, UnpairedFactor
from .tensor_store import DType, TensorEntry, TensorStore, encode, to_compute

log = logging.getLogger(__name__)

ALPHA_KEY = "lora_alpha"


@dataclass(frozen=True)
class Convention:
    """Tensor-name suffixes identifying the two factors and stored full deltas."""

    b_suffix: str = ".lora_B.weight"
    a_suffix: str = ".lora_A.weight"
    delta_suffix: str = ".lora_delta.weight"

    def classify(self, name: str) -> tuple[str, str] | None:
        # longest suffix first so nested conventions resolve predictably
        for kind, suffix in sorted(
            (("B", self.b_suffix), ("A", self.a_suffix), ("delta", self.delta_suffix)),
            key=lambda t: -len(t[1]),
        ):
            if suffix and name.endswith(suffix) and len(name) > len(suffix):
                return kind, name[: -len(suffix)]
        return None


DEFAULT_CONVENTION = Convention()


@dataclass
class AdapterLayer:
    """One low-rank pair with ``B`` (d x r) and ``A`` (r x k), already oriented."""

    layer_key: str
    B: np.ndarray
    A: np.ndarray
    dtype: DType = DType.F32

    def __post_init__(self):
        if self.B.shape[1] != self.A.shape[0]:
            raise RankMismatch(
                f"layer {self.layer_key!r}: B is {self.B.shape}, A is {self.A.shape}",
                layer=self.layer_key,
            )

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]


@dataclass
class AdapterModel:
    layers: dict[str, AdapterLayer] = field(default_factory=dict)
    # layers already stored as a full d x k delta (e.g. output of an earlier run)
    full: dict[str, np.ndarray] = field(default_factory=dict)
    full_dtypes: dict[str, DType] = field(default_factory=dict)
    passthrough: dict[str, TensorEntry] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    convention: Convention = DEFAULT_CONVENTION

    @property
    def storage_dtype(self) -> DType:
        """Dtype of the first layer's tensors in name order; F32 for an empty model."""
        dtypes = {k: l.dtype for k, l in self.layers.items()} | self.full_dtypes
        return dtypes[min(dtypes)] if dtypes else DType.F32


@dataclass
class DeltaModel:
    deltas: dict[str, np.ndarray]
    ranks: dict[str, int] = field(default_factory=dict)
    passthrough: dict[str, TensorEntry] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    dtype: DType = DType.F32

    def keys(self) -> list[str]:
        return sorted(self.deltas)

    def with_deltas(self, deltas: dict[str, np.ndarray]) -> "DeltaModel":
        return replace(self, deltas=deltas)


def _orient(key: str, B: np.ndarray, A: np.ndarray, orientation: str) -> tuple[np.ndarray, np.ndarray]:
    standard = B.shape[1] == A.shape[0]
    transposed = B.shape[0] == A.shape[1]
    if orientation == "standard":
        transposed = False
    elif orientation == "transposed":
        standard = False
    elif orientation != "auto":
        raise ValueError(f"unknown orientation {orientation!r}")

    if standard and transposed:
        # both readings fit: the shared dimension is the rank, which must be the small one
        r_std, r_tr = B.shape[1], B.shape[0]
        if r_std == r_tr:
            raise OrientationAmbiguous(
                f"layer {key!r}: square factors {B.shape} / {A.shape} admit both orientations; "
                "pass an explicit orientation",
                layer=key,
            )
        standard, transposed = r_std < r_tr, r_tr < r_std
    if standard:
        return B, A
    if transposed:
        return np.ascontiguousarray(B.T), np.ascontiguousarray(A.T)
    raise RankMismatch(
        f"layer {key!r}: factor shapes B{list(B.shape)} and A{list(A.shape)} share no inner dimension",
        layer=key,
    )


def assemble(
    store: TensorStore,
    convention: Convention = DEFAULT_CONVENTION,
    *,
    orientation: str = "auto",
    compute: DType = DType.F64,
) -> AdapterModel:
    """Group a store's tensors into adapter layers.

    Factor pairs are matched by shared prefix; tensors carrying the delta
    suffix are read as full matrices; everything else is passed through.
    """
    b_entries: dict[str, TensorEntry] = {}
    a_entries: dict[str, TensorEntry] = {}
    model = AdapterModel(metadata=dict(store.metadata), convention=convention)
    for name in store.names():
        entry = store[name]
        hit = convention.classify(name)
        if hit is None:
            model.passthrough[name] = entry
            continue
        kind, key = hit
        if kind == "B":
            b_entries[key] = entry
        elif kind == "A":
            a_entries[key] = entry
        else:
            model.full[key] = to_compute(entry, compute)
            model.full_dtypes[key] = entry.dtype

    lonely = sorted(set(b_entries) ^ set(a_entries))
    if lonely:
        raise UnpairedFactor(
            f"factors without a partner: {', '.join(lonely)}",
            layers=lonely,
        )
    for key in sorted(b_entries):
        if key in model.full:
            raise UnpairedFactor(f"layer {key!r} stored both as factors and as a full delta", layers=[key])
        B, A = _orient(key, to_compute(b_entries[key], compute), to_compute(a_entries[key], compute), orientation)
        model.layers[key] = AdapterLayer(key, B, A, b_entries[key].dtype)
    return model


def matmul_fixed_order(B: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``B @ A`` accumulated rank-one term by term, so the sum order never varies."""
    if B.shape[1] != A.shape[0]:
        raise RankMismatch(f"inner dimensions differ: {B.shape} x {A.shape}")
    dtype = np.result_type(B, A)
    out = np.zeros((B.shape[0], A.shape[1]), dtype=dtype)
    for j in range(B.shape[1]):
        out += np.multiply.outer(B[:, j], A[j, :])
    return out


def map_layers(fn, keys, threads: int | None):
    """Apply ``fn`` per key, optionally on a thread pool; result order follows ``keys``."""
    if (threads is not None and threads <= 1) or len(keys) <= 1:
        return {k: fn(k) for k in keys}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return dict(zip(keys, pool.map(fn, keys)))


def compose_delta(model: AdapterModel, *, threads: int | None = 1) -> DeltaModel:
    keys = sorted(model.layers)

    def one(key):
        layer = model.layers[key]
        return matmul_fixed_order(layer.B, layer.A)

    deltas = map_layers(one, keys, threads)
    for key, mat in model.full.items():
        deltas[key] = mat.copy()
    return DeltaModel(
        deltas={k: deltas[k] for k in sorted(deltas)},
        ranks={k: model.layers[k].rank for k in keys},
        passthrough=dict(model.passthrough),
        metadata=dict(model.metadata),
        dtype=model.storage_dtype,
    )


def check_compatible(a: DeltaModel, b: DeltaModel) -> None:
    missing = sorted(set(a.deltas) - set(b.deltas))
    extra = sorted(set(b.deltas) - set(a.deltas))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing from second: {', '.join(missing)}")
        if extra:
            parts.append(f"missing from first: {', '.join(extra)}")
        raise KeySetMismatch("layer sets differ; " + "; ".join(parts), missing=missing, extra=extra)
    for key in a.keys():
        if a.deltas[key].shape != b.deltas[key].shape:
            raise ShapeMismatch(
                f"layer {key!r}: {list(a.deltas[key].shape)} vs {list(b.deltas[key].shape)}",
                layer=key,
            )


def merge_metadata(expert: dict[str, str], anti: dict[str, str]) -> dict[str, str]:
    """Expert metadata wins; a differing LoRA alpha is reported, not reconciled."""
    ea, aa = expert.get(ALPHA_KEY), anti.get(ALPHA_KEY)
    if ea is not None and aa is not None and ea != aa:
        log.warning("lora_alpha differs (expert %s, anti-expert %s); keeping the expert's", ea, aa)
    return dict(expert)


def export(
    model: DeltaModel,
    *,
    dtype: DType | None = None,
    convention: Convention = DEFAULT_CONVENTION,
    factors: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
) -> TensorStore:
    """Build a store from a delta model.

    Layers present in ``factors`` are written as a B/A pair, the rest as full
    deltas under the delta suffix. Passthrough entries are copied verbatim.
    """
    dtype = dtype or model.dtype
    factors = factors or {}
    entries = list(model.passthrough.values())
    for key in model.keys():
        if key in factors:
            B, A = factors[key]
            entries.append(encode(key + convention.b_suffix, B, dtype))
            entries.append(encode(key + convention.a_suffix, A, dtype))
        else:
            entries.append(encode(key + convention.delta_suffix, model.deltas[key], dtype))
    return TensorStore.from_entries(entries, model.metadata)
