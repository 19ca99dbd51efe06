"""UE-side scaling, return to the time domain and SINR measurement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import td
from .errors import ConfigError, DimensionError
from .precoder import PowerAllocation
from .scalars import ScalarEntry

# reported in place of an infinite SINR when the residual error is exactly zero
SINR_CAP = 1e12


def ue_scale(alloc: PowerAllocation, alpha: float, beta: float) -> np.ndarray:
    """Per-user receive scaling ``(alpha / beta) * sqrt(p_k / q_k)``."""
    return (alpha / beta) * np.sqrt(alloc.p / alloc.q)


def detect_bin(
    r: np.ndarray, entry: ScalarEntry, alloc: PowerAllocation, sigma2_w: float
) -> np.ndarray:
    """RZF symbol estimates from received FD samples ``r`` (``(..., K)``)."""
    if not math.isclose(entry.sigma2_w, sigma2_w, rel_tol=1e-9):
        raise ConfigError(
            f"scalar entry is for sigma2_w={entry.sigma2_w!r}, receiver noise is {sigma2_w!r}"
        )
    return np.asarray(r) * ue_scale(alloc, entry.alpha, entry.beta_rzf)


def detect_bin_zf(r: np.ndarray, alloc: PowerAllocation, beta: float) -> np.ndarray:
    return np.asarray(r) * ue_scale(alloc, 1.0, beta)


def time_domain_symbols(s_hat_fd: np.ndarray) -> np.ndarray:
    """Per-user inverse unitary DFT over the bin axis of an ``(N, K)`` array."""
    return td(np.asarray(s_hat_fd), axis=0)


@dataclass(frozen=True, eq=False)
class DetectionResult:
    s_hat: np.ndarray
    bias: np.ndarray
    sinr: np.ndarray
    evm: np.ndarray
    mse: np.ndarray

    @property
    def sinr_db(self) -> np.ndarray:
        return 10.0 * np.log10(self.sinr)


def measure_sinr(s: np.ndarray, s_hat: np.ndarray) -> DetectionResult:
    """Bias-separated SINR per user (columns) of transmitted vs. estimated symbols.

    ``bias = <s_hat s*> / <|s|^2>`` and
    ``sinr = <|s|^2> |bias|^2 / <|s_hat - bias s|^2>``, so a pure gain error
    is reported in ``bias`` and not counted as noise.  ``evm`` and ``mse``
    are the raw (uncorrected) error figures.
    """
    s = np.asarray(s)
    s_hat = np.asarray(s_hat)
    if s.shape != s_hat.shape or s.ndim != 2:
        raise DimensionError(f"expected matching (N, K) arrays, got {s.shape} and {s_hat.shape}")
    power = np.mean(np.abs(s) ** 2, axis=0)
    if np.any(power == 0):
        raise ConfigError("zero-power reference symbols: SINR undefined")
    bias = np.mean(s_hat * s.conj(), axis=0) / power
    resid = np.mean(np.abs(s_hat - bias * s) ** 2, axis=0)
    with np.errstate(divide="ignore"):
        sinr = np.where(resid > 0, power * np.abs(bias) ** 2 / resid, SINR_CAP)
    sinr = np.minimum(sinr, SINR_CAP)
    mse = np.mean(np.abs(s_hat - s) ** 2, axis=0)
    return DetectionResult(s_hat, bias, sinr, np.sqrt(mse / power), mse)
