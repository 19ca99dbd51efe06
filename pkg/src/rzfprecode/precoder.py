"""Per-bin ZF and RZF downlink precoding, power allocation and cost accounting.

All precoding functions accept a single bin (``A`` of shape ``(M, K)``,
symbols of shape ``(K,)``) or a stack of bins with any leading batch shape,
e.g. a whole frame ``(N, M, K)`` / ``(N, K)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError


def _t(A: np.ndarray) -> np.ndarray:
    return np.swapaxes(A, -1, -2)


def _conj_apply(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    # A* y without conjugating the (large) channel array
    return (A @ y.conj()[..., None])[..., 0].conj()


def gram(A: np.ndarray) -> np.ndarray:
    """Downlink Gram matrix ``A^T A*`` per bin, shape ``(..., K, K)``."""
    return _t(A) @ A.conj()


def cholesky_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(L L^H) x = b`` for batched lower-triangular ``L`` and vectors ``b``."""
    K = L.shape[-1]
    y = np.empty(np.broadcast_shapes(L.shape[:-1], b.shape), dtype=np.result_type(L, b))
    for i in range(K):
        acc = np.einsum("...j,...j->...", L[..., i, :i], y[..., :i])
        y[..., i] = (b[..., i] - acc) / L[..., i, i]
    x = np.empty_like(y)
    for i in range(K - 1, -1, -1):
        acc = np.einsum("...j,...j->...", L[..., i + 1 :, i].conj(), x[..., i + 1 :])
        x[..., i] = (y[..., i] - acc) / L[..., i, i].conj()
    return x


def _cholesky(H: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        cond = np.max(np.linalg.cond(H))
        raise NumericalError(
            f"{what} is not positive definite (worst condition number {cond:.3g})"
        ) from exc


@dataclass(frozen=True, eq=False)
class UplinkInverse:
    """Cholesky factors of the uplink MMSE matrix ``A^H A + s2 I``, one per bin.

    A live system already holds this factorization from uplink detection.
    The downlink needs ``(A^T A* + s2 I)^-1``, which is its complex conjugate,
    so :meth:`solve_downlink` works on ``conj(chol)`` and adds no
    factorization cost.
    """

    chol: np.ndarray
    sigma2_w: float

    @classmethod
    def from_channel(cls, A: np.ndarray, sigma2_w: float, dl_gram: np.ndarray | None = None):
        if not sigma2_w > 0:
            raise ConfigError(f"regularizer needs sigma2_w > 0, got {sigma2_w}")
        G = gram(A) if dl_gram is None else dl_gram
        K = G.shape[-1]
        ul = G.conj() + sigma2_w * np.eye(K)
        return cls(_cholesky(ul, "uplink MMSE matrix"), float(sigma2_w))

    def solve_downlink(self, b: np.ndarray) -> np.ndarray:
        return cholesky_solve(self.chol.conj(), b)


@dataclass(frozen=True, eq=False)
class PowerAllocation:
    """Large-scale path-loss powers ``p`` and the transmit powers ``q`` used."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).copy()
        q = np.asarray(self.q, dtype=float).copy()
        if p.ndim != 1 or p.shape != q.shape:
            raise DimensionError(f"p and q must be equal-length vectors, got {p.shape}, {q.shape}")
        if np.any(p <= 0) or np.any(q <= 0):
            raise ConfigError("path-loss and transmit powers must be positive")
        if not math.isclose(q.sum(), p.sum(), rel_tol=1e-10):
            raise ConfigError(f"sum(q)={q.sum()!r} differs from p_total={p.sum()!r}")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def unoptimized(cls, p) -> "PowerAllocation":
        p = np.asarray(p, dtype=float)
        return cls(p, p)

    @property
    def K(self) -> int:
        return self.p.size

    @property
    def p_total(self) -> float:
        return float(self.p.sum())


def beta_zf(M: int, K: int) -> float:
    if not M > K >= 1:
        raise ConfigError(f"ZF needs M > K >= 1, got M={M}, K={K}")
    return math.sqrt(M - K)


def _check_shapes(A: np.ndarray, s: np.ndarray, alloc: PowerAllocation):
    if A.shape[-1] != s.shape[-1] or A.shape[-1] != alloc.K:
        raise DimensionError(
            f"user count mismatch: A has {A.shape[-1]}, s has {s.shape[-1]}, "
            f"allocation has {alloc.K}"
        )


def zf_precode_bin(
    A: np.ndarray,
    s: np.ndarray,
    alloc: PowerAllocation,
    beta: float,
    dl_gram: np.ndarray | None = None,
) -> np.ndarray:
    """``beta * A* (A^T A*)^-1 Q^(1/2) s`` for each bin."""
    A = np.asarray(A)
    s = np.asarray(s)
    _check_shapes(A, s, alloc)
    G = gram(A) if dl_gram is None else dl_gram
    L = _cholesky(G, "ZF Gram matrix A^T A*")
    y = cholesky_solve(L, np.sqrt(alloc.q) * s)
    return beta * _conj_apply(A, y)


def rzf_precode_bin(
    A: np.ndarray,
    s: np.ndarray,
    alloc: PowerAllocation,
    sigma2_w: float,
    beta: float,
    inverse: UplinkInverse | None = None,
) -> np.ndarray:
    """``beta * A* (A^T A* + s2 I)^-1 Q^(1/2) s`` using the reused uplink factorization."""
    A = np.asarray(A)
    s = np.asarray(s)
    _check_shapes(A, s, alloc)
    if inverse is None:
        inverse = UplinkInverse.from_channel(A, sigma2_w)
    elif inverse.sigma2_w != sigma2_w:
        raise ConfigError(
            f"uplink factorization was built for sigma2_w={inverse.sigma2_w}, "
            f"precoding asked for {sigma2_w}"
        )
    y = inverse.solve_downlink(np.sqrt(alloc.q) * s)
    return beta * _conj_apply(A, y)


def rzf_precode_full(
    A: np.ndarray, s: np.ndarray, alloc: PowerAllocation, sigma2_w: float, beta: float
) -> np.ndarray:
    """Reference RZF through the ``M x M`` regularized inverse (no inversion lemma).

    ``beta * (A* A^T + s2 I_M)^-1 A* Q^(1/2) s``.  O(M^3) per bin; for checks only.
    """
    A = np.asarray(A)
    M = A.shape[-2]
    big = A.conj() @ _t(A) + sigma2_w * np.eye(M)
    rhs = A.conj() @ (np.sqrt(alloc.q) * s)[..., None]
    return beta * np.linalg.solve(big, rhs)[..., 0]


def optimize_powers(
    p, sigma2_od: float, beta_rzf: float, sigma2_w: float
) -> PowerAllocation:
    """Transmit powers that give every user the same predicted output SINR.

    ``q_k = (s_od * p_total + p_k * s2 / beta**2) / (K * s_od + s2 / beta**2)``
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0 or np.any(p <= 0):
        raise ConfigError("path-loss powers must be a non-empty vector of positive values")
    if sigma2_od < 0:
        raise ConfigError(f"sigma2_od must be nonnegative, got {sigma2_od}")
    noise = sigma2_w / beta_rzf**2
    denom = p.size * sigma2_od + noise
    if denom <= 0:
        raise ConfigError("degenerate power optimization: sigma2_od and sigma2_w are both zero")
    q = (sigma2_od * p.sum() + p * noise) / denom
    # fix the last-ulp drift so the budget holds exactly
    q *= p.sum() / q.sum()
    return PowerAllocation(p, q)


def predicted_sinr(
    alloc: PowerAllocation, alpha: float, beta: float, sigma2_od: float, sigma2_w: float
) -> np.ndarray:
    """Per-user analytic output SINR for the given allocation.

    ``1 / (a^2 s_od (p_total - q_k)/q_k + a^2 p_k s2 / (beta^2 q_k))``; with
    ``q == p`` this is the unoptimized expression.
    """
    p, q = alloc.p, alloc.q
    total = q.sum()
    mui = alpha**2 * sigma2_od * (total - q) / q
    noise = alpha**2 * p * sigma2_w / (beta**2 * q)
    return 1.0 / (mui + noise)


def equal_power_sinr(K: int, alpha: float, beta: float, sigma2_od: float, sigma2_w: float) -> float:
    return 1.0 / (alpha**2 * sigma2_od * (K - 1) + alpha**2 * sigma2_w / beta**2)


@dataclass(frozen=True)
class ComplexityReport:
    """Complex multiplies per frequency bin.

    ZF: ``K^2 M`` (Gram) + ``K^3`` (inverse) + ``K^2`` + ``KM`` (two products).
    RZF reuses the conjugated uplink inverse, leaving ``K^2 + KM``.
    """

    M: int
    K: int
    zf_multiplies_per_bin: int
    rzf_multiplies_per_bin: int

    @property
    def ratio(self) -> float:
        return self.zf_multiplies_per_bin / self.rzf_multiplies_per_bin


def complexity_report(M: int, K: int) -> ComplexityReport:
    if not (int(M) == M and int(K) == K) or not M > K >= 1:
        raise ConfigError(f"complexity needs integers M > K >= 1, got M={M}, K={K}")
    M, K = int(M), int(K)
    return ComplexityReport(M, K, K * K + K * M + K**3 + K * K * M, K * K + K * M)


def complexity_grid(
    m_values: Iterable[int] = (32, 64, 128), k_max: int = 64
) -> list[ComplexityReport]:
    """Reports for ``K = 1 .. min(k_max, M - 1)`` at each antenna count."""
    return [
        complexity_report(M, K)
        for M in m_values
        for K in range(1, min(k_max, M - 1) + 1)
    ]


def write_complexity_csv(reports: Iterable[ComplexityReport], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["M", "K", "zf", "rzf"])
        for r in reports:
            writer.writerow([r.M, r.K, r.zf_multiplies_per_bin, r.rzf_multiplies_per_bin])
    return path
