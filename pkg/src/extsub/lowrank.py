"""Truncated SVD re-factorization of delta matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, RankTooLarge


@dataclass
class TruncationResult:
    B_out: np.ndarray
    A_out: np.ndarray
    singular_values: np.ndarray
    rel_frobenius_error: float

    @property
    def rank(self) -> int:
        return self.B_out.shape[1]


def canonical_svd(delta: np.ndarray):
    """Thin SVD with a fixed sign convention.

    In each left singular vector the entry of largest magnitude (lowest index
    on ties) is made non-negative; the matching right vector flips with it.
    """
    delta = np.asarray(delta, dtype=np.float64)
    U, s, Vt = np.linalg.svd(delta, full_matrices=False)
    if U.size:
        pivot = np.argmax(np.abs(U), axis=0)
        signs = np.where(U[pivot, np.arange(U.shape[1])] < 0, -1.0, 1.0)
        U = U * signs
        Vt = Vt * signs[:, None]
    return U, s, Vt


def tail_error(s: np.ndarray, rank: int) -> float:
    s = np.asarray(s, dtype=np.float64)
    total = float(np.sum(s * s))
    if total == 0.0:
        return 0.0
    tail = float(np.sum(s[rank:] * s[rank:]))
    return float(np.sqrt(min(1.0, tail / total)))


def svd_truncate(delta: np.ndarray, target_rank: int) -> TruncationResult:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 2:
        raise InvalidArgument(f"expected a matrix, got shape {delta.shape}")
    if target_rank < 1:
        raise InvalidArgument(f"target rank must be positive, got {target_rank}")
    if target_rank > min(delta.shape):
        raise RankTooLarge(
            f"target rank {target_rank} exceeds min{list(delta.shape)} = {min(delta.shape)}",
            target_rank=target_rank,
            shape=list(delta.shape),
        )
    U, s, Vt = canonical_svd(delta)
    root = np.sqrt(s[:target_rank])
    return TruncationResult(
        B_out=U[:, :target_rank] * root,
        A_out=root[:, None] * Vt[:target_rank],
        singular_values=s,
        rel_frobenius_error=tail_error(s, target_rank),
    )


def effective_rank(delta: np.ndarray, tol_ratio: float = 1e-6) -> int:
    if not 0 < tol_ratio < 1:
        raise InvalidArgument(f"tol_ratio must lie in (0, 1), got {tol_ratio}")
    s = np.linalg.svd(np.asarray(delta, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.count_nonzero(s >= tol_ratio * s[0]))
