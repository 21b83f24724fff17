"""Test fixtures builders and independent oracles.

Nothing here imports the production row algorithm; the references are
written from the defining formulas.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from extsub.tensor_store import DType, TensorStore, encode

EXT = np.longdouble


def lora_store(
    rng: np.random.Generator,
    *,
    layers: int = 3,
    d: int = 8,
    k: int = 6,
    r: int = 2,
    dtype: DType = DType.F32,
    passthrough: bool = True,
    metadata: dict | None = None,
    prefix: str = "model.layers",
) -> TensorStore:
    entries = []
    for i in range(layers):
        key = f"{prefix}.{i}.q_proj"
        entries.append(encode(key + ".lora_B.weight", rng.standard_normal((d, r)), dtype))
        entries.append(encode(key + ".lora_A.weight", rng.standard_normal((r, k)), dtype))
    if passthrough:
        entries.append(encode("model.embed_scale", rng.standard_normal(5), DType.F16))
        entries.append(encode("model.norm.weight", rng.standard_normal((3, 4)), DType.BF16))
    return TensorStore.from_entries(entries, metadata or {})


def delta_store(rng, *, layers=3, d=8, k=6, dtype=DType.F32, prefix="model.layers") -> TensorStore:
    entries = [
        encode(f"{prefix}.{i}.q_proj.lora_delta.weight", rng.standard_normal((d, k)), dtype) for i in range(layers)
    ]
    return TensorStore.from_entries(entries)


# -- oracles ---------------------------------------------------------------


def seq_sum(x: np.ndarray) -> np.ndarray:
    """Left-to-right sum over the last axis (cumulative, so order is fixed)."""
    return np.cumsum(x, axis=-1)[..., -1]


def ext_sub_reference(v_plus: np.ndarray, v_minus: np.ndarray, lam: float) -> np.ndarray:
    """Row-batched extended-precision evaluation of the defining formulas."""
    p = np.asarray(v_plus, dtype=EXT)
    m = np.asarray(v_minus, dtype=EXT)
    up = p / np.sqrt(seq_sum(p * p))[..., None]
    um = m / np.sqrt(seq_sum(m * m))[..., None]
    g = up + um
    gh = g / np.sqrt(seq_sum(g * g))[..., None]
    general = seq_sum(m * gh)[..., None] * gh
    return p - np.asarray(lam, dtype=EXT) * (m - general)


def exact_extract(v_plus, v_minus):
    """Exact rational general part and deficiency; needs rational row norms."""
    from math import isqrt

    def norm(v):
        sq = sum(Fraction(x) ** 2 for x in v)
        num, den = isqrt(sq.numerator), isqrt(sq.denominator)
        assert Fraction(num, den) ** 2 == sq, "row norm is irrational"
        return Fraction(num, den)

    p = [Fraction(x) for x in v_plus]
    m = [Fraction(x) for x in v_minus]
    g = [a / norm(p) + b / norm(m) for a, b in zip(p, m)]
    gg = sum(x * x for x in g)
    coef = sum(a * b for a, b in zip(m, g)) / gg
    general = [coef * x for x in g]
    return g, general, [a - b for a, b in zip(m, general)]


def triple_loop_matmul(B, A):
    d, r = len(B), len(B[0])
    k = len(A[0])
    out = [[0.0] * k for _ in range(d)]
    for i in range(d):
        for j in range(k):
            s = 0.0
            for t in range(r):
                s += float(B[i][t]) * float(A[t][j])
            out[i][j] = s
    return np.array(out)


def bf16_table() -> tuple[np.ndarray, np.ndarray]:
    """All finite bf16 values (ascending, -0 dropped) with their bit patterns."""
    bits = np.arange(0x10000, dtype=np.uint32)
    with np.errstate(invalid="ignore"):
        vals = (bits << 16).view(np.float32).astype(np.float64)
    keep = np.isfinite(vals) & ~((vals == 0) & (bits == 0x8000))
    order = np.argsort(vals[keep], kind="stable")
    return vals[keep][order], bits[keep][order].astype(np.uint16)


def bf16_round_reference(x: float, table=None) -> int:
    """Nearest bf16 bit pattern to ``x`` with ties to even, by exact comparison."""
    vals, bits = table or bf16_table()
    limit = Fraction(2) ** 128 - Fraction(2) ** (127 - 8)  # halfway past the largest finite value
    if abs(Fraction(x)) >= limit:
        return 0x7F80 if x > 0 else 0xFF80
    i = int(np.searchsorted(vals, x))
    best = None
    for j in (i - 1, i):
        if 0 <= j < len(vals):
            dist = abs(Fraction(float(vals[j])) - Fraction(x))
            cand = (dist, int(bits[j]) & 1, int(bits[j]))
            if best is None or cand[:2] < best[:2]:
                best = cand
    pattern = best[2]
    if pattern == 0 and np.signbit(x):
        pattern = 0x8000
    return pattern
