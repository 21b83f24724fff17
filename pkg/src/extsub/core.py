"""Row-wise deficiency extraction and the two subtraction operators.

Each row ``v+`` of the expert delta and ``v-`` of the anti-expert delta
defines a general direction ``g = v+/|v+| + v-/|v-|``. The part of ``v-``
along ``g`` is shared capability; the remainder is the deficiency that
Ext-Sub removes from the expert:

    general    = (v- . g_hat) g_hat
    deficiency = v- - general
    result     = v+ - lambda * deficiency
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .adapter import DeltaModel, check_compatible, map_layers, merge_metadata
from .errors import InvalidArgument

N_BINS = 16


class Degeneracy(enum.IntEnum):
    NONE = 0
    ZERO_EXPERT = 1
    ZERO_ANTI = 2
    ANTI_PARALLEL = 3


class Mode(str, enum.Enum):
    DIRECT = "direct"
    EXT = "ext"


DEFAULT_LAMBDA = {Mode.DIRECT: 0.2, Mode.EXT: 1.0}


def default_eps(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float32 else 1e-12


@dataclass(frozen=True)
class UnlearnConfig:
    lam: float = 1.0
    mode: Mode = Mode.EXT
    eps: float | None = None  # None: chosen from the compute dtype
    axis: int = 0

    def __post_init__(self):
        if not (self.lam >= 0):
            raise InvalidArgument(f"lambda must be non-negative, got {self.lam}")
        if self.eps is not None and not (self.eps > 0):
            raise InvalidArgument(f"eps must be positive, got {self.eps}")
        if self.axis not in (0, 1):
            raise InvalidArgument(f"axis must be 0 or 1, got {self.axis}")


@dataclass
class RowGeometry:
    v_plus: np.ndarray
    v_minus: np.ndarray
    g: np.ndarray | None
    general_part: np.ndarray
    deficiency: np.ndarray
    degenerate: Degeneracy


def _row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt((m * m).sum(axis=1))


def _row_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(axis=1)


def _as_rows(m: np.ndarray, axis: int) -> np.ndarray:
    return m if axis == 0 else m.T


def split_rows(plus: np.ndarray, minus: np.ndarray, eps: float | None = None):
    """Vectorized decomposition of every row pair.

    Returns ``(g, general, deficiency, flags)``. ``g`` is the unnormalized
    general direction (zero on degenerate rows); ``flags`` holds a
    :class:`Degeneracy` code per row.
    """
    plus = np.atleast_2d(plus)
    minus = np.atleast_2d(minus)
    if plus.shape != minus.shape:
        raise InvalidArgument(f"row blocks differ in shape: {plus.shape} vs {minus.shape}")
    dtype = np.result_type(plus, minus, np.float32)
    plus = plus.astype(dtype, copy=False)
    minus = minus.astype(dtype, copy=False)
    if eps is None:
        eps = default_eps(dtype)

    n_plus = _row_norms(plus)
    n_minus = _row_norms(minus)
    flags = np.zeros(plus.shape[0], dtype=np.int8)
    zero_exp = n_plus < eps
    zero_anti = ~zero_exp & (n_minus < eps)
    flags[zero_exp] = Degeneracy.ZERO_EXPERT
    flags[zero_anti] = Degeneracy.ZERO_ANTI

    live = flags == Degeneracy.NONE
    g = np.zeros_like(plus)
    g[live] = plus[live] / n_plus[live, None] + minus[live] / n_minus[live, None]
    n_g = _row_norms(g)
    anti = live & (n_g < eps)
    flags[anti] = Degeneracy.ANTI_PARALLEL
    g[anti] = 0
    live &= ~anti

    general = minus.copy()
    deficiency = np.zeros_like(minus)
    g_hat = g[live] / n_g[live, None]
    general[live] = _row_dots(minus[live], g_hat)[:, None] * g_hat
    deficiency[live] = minus[live] - general[live]
    # no shared direction: the whole anti-expert row is deficiency
    general[anti] = 0
    deficiency[anti] = minus[anti]
    return g, general, deficiency, flags


def general_direction(v_plus, v_minus, eps: float | None = None) -> np.ndarray | Degeneracy:
    """``v+/|v+| + v-/|v-|``, or the :class:`Degeneracy` that prevents it."""
    g, _, _, flags = split_rows(np.asarray(v_plus)[None, :], np.asarray(v_minus)[None, :], eps)
    flag = Degeneracy(int(flags[0]))
    return g[0] if flag is Degeneracy.NONE else flag


def extract_row(v_plus, v_minus, eps: float | None = None) -> RowGeometry:
    v_plus, v_minus = np.asarray(v_plus), np.asarray(v_minus)
    g, general, deficiency, flags = split_rows(v_plus[None, :], v_minus[None, :], eps)
    flag = Degeneracy(int(flags[0]))
    return RowGeometry(
        v_plus=v_plus,
        v_minus=v_minus,
        g=g[0] if flag is Degeneracy.NONE else None,
        general_part=general[0],
        deficiency=deficiency[0],
        degenerate=flag,
    )


def ext_sub_row(v_plus, v_minus, lam: float, eps: float | None = None) -> np.ndarray:
    v_plus = np.asarray(v_plus)
    if lam == 0:
        return v_plus.copy()
    return v_plus - lam * extract_row(v_plus, v_minus, eps).deficiency


def extract_matrix(plus: np.ndarray, minus: np.ndarray, eps: float | None = None, axis: int = 0):
    """Deficiency matrix of ``minus`` relative to ``plus`` plus the per-row flags."""
    _, _, deficiency, flags = split_rows(_as_rows(plus, axis), _as_rows(minus, axis), eps)
    return np.ascontiguousarray(_as_rows(deficiency, axis)), flags


# -- geometry report -------------------------------------------------------


@dataclass
class LayerGeometry:
    rows: int
    cos_hist: list[int]
    defrac_hist: list[int]
    mean_norm_plus: float
    mean_norm_minus: float
    degenerate: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cos_hist": list(self.cos_hist),
            "defrac_hist": list(self.defrac_hist),
            "mean_norm_plus": self.mean_norm_plus,
            "mean_norm_minus": self.mean_norm_minus,
            "degenerate": dict(self.degenerate),
        }


@dataclass
class GeometryReport:
    layers: dict[str, LayerGeometry] = field(default_factory=dict)

    def degenerate_totals(self) -> dict[str, int]:
        totals = {"zero_expert": 0, "zero_anti": 0, "anti_parallel": 0}
        for layer in self.layers.values():
            for kind, count in layer.degenerate.items():
                totals[kind] += count
        return totals

    def to_dict(self) -> dict:
        return {"layers": {k: self.layers[k].to_dict() for k in sorted(self.layers)}}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)


def _histogram(values: np.ndarray, lo: float, hi: float) -> list[int]:
    idx = np.floor((values - lo) / (hi - lo) * N_BINS).astype(np.int64)
    idx = np.clip(idx, 0, N_BINS - 1)
    return np.bincount(idx, minlength=N_BINS).tolist()


def layer_geometry(plus: np.ndarray, minus: np.ndarray, eps: float | None = None, axis: int = 0) -> LayerGeometry:
    plus, minus = _as_rows(plus, axis), _as_rows(minus, axis)
    _, _, deficiency, flags = split_rows(plus, minus, eps)
    return _summarize(plus, minus, deficiency, flags)


def _summarize(plus, minus, deficiency, flags) -> LayerGeometry:
    n_plus, n_minus = _row_norms(plus), _row_norms(minus)

    # cosine undefined when either row is zero; deficiency fraction when v- is
    has_cos = (flags != Degeneracy.ZERO_EXPERT) & (flags != Degeneracy.ZERO_ANTI)
    cos = _row_dots(plus[has_cos], minus[has_cos]) / (n_plus[has_cos] * n_minus[has_cos])
    has_frac = flags != Degeneracy.ZERO_ANTI
    frac = _row_norms(deficiency[has_frac]) / np.where(n_minus[has_frac] > 0, n_minus[has_frac], 1.0)

    rows = plus.shape[0]
    return LayerGeometry(
        rows=rows,
        cos_hist=_histogram(np.clip(cos, -1.0, 1.0), -1.0, 1.0),
        defrac_hist=_histogram(np.clip(frac, 0.0, 1.0), 0.0, 1.0),
        mean_norm_plus=float(n_plus.mean()) if rows else 0.0,
        mean_norm_minus=float(n_minus.mean()) if rows else 0.0,
        degenerate={
            "zero_expert": int((flags == Degeneracy.ZERO_EXPERT).sum()),
            "zero_anti": int((flags == Degeneracy.ZERO_ANTI).sum()),
            "anti_parallel": int((flags == Degeneracy.ANTI_PARALLEL).sum()),
        },
    )


def geometry_stats(
    base: DeltaModel, neg: DeltaModel, eps: float | None = None, *, axis: int = 0, threads: int | None = 1
) -> GeometryReport:
    check_compatible(base, neg)
    keys = base.keys()
    layers = map_layers(lambda k: layer_geometry(base.deltas[k], neg.deltas[k], eps, axis), keys, threads)
    return GeometryReport(layers)


# -- model-level operators -------------------------------------------------


def direct_subtract(base: DeltaModel, neg: DeltaModel, lam: float) -> DeltaModel:
    """``base - lam * neg`` layer by layer."""
    if not lam >= 0:
        raise InvalidArgument(f"lambda must be non-negative, got {lam}")
    check_compatible(base, neg)
    out = base.with_deltas(
        {k: base.deltas[k].copy() if lam == 0 else base.deltas[k] - lam * neg.deltas[k] for k in base.keys()}
    )
    out.metadata = merge_metadata(base.metadata, neg.metadata)
    return out


def add(base: DeltaModel, other: DeltaModel, weight: float) -> DeltaModel:
    """``base + weight * other`` layer by layer."""
    check_compatible(base, other)
    return base.with_deltas({k: base.deltas[k] + weight * other.deltas[k] for k in base.keys()})


def extract(
    base: DeltaModel, neg: DeltaModel, eps: float | None = None, *, axis: int = 0, threads: int | None = 1
) -> tuple[DeltaModel, GeometryReport]:
    """Deficiency of ``neg`` against ``base`` for every layer, as a delta model.

    The result carries the anti-expert's passthrough entries and metadata.
    """
    check_compatible(base, neg)
    keys = base.keys()

    def one(key):
        plus, minus = _as_rows(base.deltas[key], axis), _as_rows(neg.deltas[key], axis)
        _, _, deficiency, flags = split_rows(plus, minus, eps)
        geometry = _summarize(plus, minus, deficiency, flags)
        return np.ascontiguousarray(_as_rows(deficiency, axis)), geometry

    results = map_layers(one, keys, threads)
    deficiency = neg.with_deltas({k: results[k][0] for k in keys})
    return deficiency, GeometryReport({k: results[k][1] for k in keys})


def ext_sub(
    base: DeltaModel, neg: DeltaModel, cfg: UnlearnConfig = UnlearnConfig(), *, threads: int | None = 1
) -> tuple[DeltaModel, GeometryReport]:
    """Extraction-before-subtraction: ``base - lam * Ext_base(neg)``."""
    deficiency, report = extract(base, neg, cfg.eps, axis=cfg.axis, threads=threads)
    return direct_subtract(base, deficiency, cfg.lam), report


def unlearn(
    base: DeltaModel, neg: DeltaModel, cfg: UnlearnConfig, *, threads: int | None = 1
) -> tuple[DeltaModel, GeometryReport | None]:
    if cfg.mode is Mode.DIRECT:
        return direct_subtract(base, neg, cfg.lam), None
    return ext_sub(base, neg, cfg, threads=threads)
