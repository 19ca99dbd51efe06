"""Wishart eigenvalue density and the RZF scale factors derived from it.

For a ``K x K`` Wishart matrix ``W = A.T @ A.conj()`` with ``A`` an ``M x K``
matrix of i.i.d. unit-variance circular complex Gaussians, the unordered
eigenvalue density is a Laguerre-polynomial series.  Integrating it gives

* ``lambda_beta  = E[z / (z + s2)**2]``  -> ``beta_rzf = 1 / sqrt(lambda_beta)``
* ``lambda_alpha = E[1 / (z + s2)]``     -> ``alpha = 1 / (1 - s2 * lambda_alpha)``

with ``s2`` the receiver noise variance.  ``sigma2_od``, the off-diagonal
variance of ``W (W + s2 I)^-1``, has no closed form and is estimated by
Monte Carlo.

Table file formats
------------------
CSV (interchange): ``#``-prefixed metadata lines, then the header
``K,snr_db,sigma2_w,lambda_beta,beta_rzf,lambda_alpha,alpha,sigma2_od,sigma2_od_stderr``
and one row per grid point, K-major.  Floats are written with ``repr`` so
they round-trip exactly.

Binary, all little-endian::

    offset  type             content
    0       char[4]          b"RZFT"
    4       uint16           format version (1)
    6       uint16           reserved, 0
    8       uint32           M
    12      uint32           n_k
    16      uint32           n_snr
    20      uint32           Monte Carlo draws
    24      uint64           seed
    32      int32[n_k]       K values
    ...     float64[n_snr]   SNR grid in dB
    ...     float64[n_k, n_snr, 7]  entries, row-major, fields in FIELDS order
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from ._rng import complex_normal, stream
from .errors import ConfigError, NumericalError, TableRangeError

FORMAT_VERSION = 1
FIELDS = (
    "sigma2_w",
    "lambda_beta",
    "beta_rzf",
    "lambda_alpha",
    "alpha",
    "sigma2_od",
    "sigma2_od_stderr",
)
CSV_COLUMNS = ("K", "snr_db") + FIELDS

QUAD_RTOL = 1e-8
DEFAULT_DRAWS = 10_000
_CHUNK = 500


def snr_to_sigma2(snr_db):
    """Input SNR in dB to noise variance (unit signal power)."""
    return 10.0 ** (-np.asarray(snr_db, dtype=float) / 10.0)


@dataclass(frozen=True)
class WishartSpec:
    M: int
    K: int

    def __post_init__(self):
        if not (int(self.M) == self.M and int(self.K) == self.K):
            raise ConfigError("Wishart dimensions must be integers")
        if not self.M > self.K >= 1:
            raise ConfigError(
                f"unsupported Wishart spec M={self.M}, K={self.K}: need M > K >= 1"
            )

    @property
    def dof_excess(self) -> int:
        return self.M - self.K

    def support(self) -> tuple[float, float]:
        """Asymptotic edges of the eigenvalue bulk, ``(sqrt(M) -/+ sqrt(K))**2``."""
        return (
            (math.sqrt(self.M) - math.sqrt(self.K)) ** 2,
            (math.sqrt(self.M) + math.sqrt(self.K)) ** 2,
        )


class MonteCarloEstimate(NamedTuple):
    value: float
    stderr: float


def laguerre(n_terms: int, a: float, z) -> np.ndarray:
    """Generalized Laguerre polynomials ``L_k^a(z)`` for ``k < n_terms``.

    Three-term recurrence; returns an array of shape ``(n_terms,) + shape(z)``.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty((n_terms,) + z.shape)
    out[0] = 1.0
    if n_terms > 1:
        out[1] = 1.0 + a - z
    for k in range(1, n_terms - 1):
        out[k + 1] = ((2 * k + 1 + a - z) * out[k] - (k + a) * out[k - 1]) / (k + 1)
    return out


def wishart_pdf(spec: WishartSpec, z):
    """Eigenvalue density of the ``K x K`` Wishart matrix with ``M`` degrees of freedom.

    Accepts a scalar or an array of nonnegative ``z``.  The factorial ratio
    ``k!/(k+M-K)!`` and the ``z**(M-K) e**-z`` envelope are combined in the
    log domain and split evenly over the squared polynomial to stay in range.
    """
    zz = np.asarray(z, dtype=float)
    if np.any(zz < 0):
        raise ValueError("wishart_pdf is defined for z >= 0")
    a = spec.dof_excess
    k = np.arange(spec.K).reshape((-1,) + (1,) * zz.ndim)
    with np.errstate(divide="ignore"):
        log_env = a * np.log(zz) - zz
    half = np.exp(0.5 * (gammaln(k + 1) - gammaln(k + a + 1) + log_env))
    terms = (laguerre(spec.K, a, zz) * half) ** 2
    val = terms.sum(axis=0) / spec.K
    return float(val) if np.ndim(z) == 0 else val


def _upper_limit(spec: WishartSpec) -> float:
    # first point past the bulk where the density (times z) is negligible
    _, hi = spec.support()
    step = max(1.0, math.sqrt(spec.M))
    z = max(hi, float(spec.M))
    while wishart_pdf(spec, z) * max(z, 1.0) > 1e-18:
        z += step
    return z


def _integrate(spec: WishartSpec, func, what: str) -> float:
    lo, hi = spec.support()
    z_max = _upper_limit(spec)
    points = sorted({p for p in (lo, float(spec.M), hi) if 0 < p < z_max})
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, abserr = integrate.quad(
                func, 0.0, z_max, points=points, epsabs=0.0,
                epsrel=QUAD_RTOL * 1e-2, limit=500,
            )
        except integrate.IntegrationWarning as exc:
            raise NumericalError(
                f"{what}: quadrature did not converge for M={spec.M}, K={spec.K} "
                f"on [0, {z_max:g}]: {exc}"
            ) from exc
    if not np.isfinite(value) or abserr > QUAD_RTOL * abs(value):
        raise NumericalError(
            f"{what}: quadrature error estimate {abserr:.3g} exceeds "
            f"{QUAD_RTOL:g} relative (value {value:.6g}, M={spec.M}, K={spec.K})"
        )
    return value


def pdf_moment(spec: WishartSpec, order: int) -> float:
    """``integral z**order f(z) dz``; order 0 checks normalization, order 1 gives M."""
    return _integrate(spec, lambda z: z**order * wishart_pdf(spec, z), f"moment {order}")


def _check_sigma2(sigma2_w: float) -> float:
    sigma2_w = float(sigma2_w)
    if not sigma2_w > 0:
        raise ConfigError(f"noise variance must be positive, got {sigma2_w}")
    return sigma2_w


def compute_lambda_beta(spec: WishartSpec, sigma2_w: float) -> float:
    s2 = _check_sigma2(sigma2_w)
    return _integrate(
        spec, lambda z: wishart_pdf(spec, z) * z / (z + s2) ** 2, f"lambda_beta(s2={s2:g})"
    )


def compute_lambda_alpha(spec: WishartSpec, sigma2_w: float) -> float:
    s2 = _check_sigma2(sigma2_w)
    return _integrate(
        spec, lambda z: wishart_pdf(spec, z) / (z + s2), f"lambda_alpha(s2={s2:g})"
    )


def compute_beta_rzf(lambda_beta: float) -> float:
    return 1.0 / math.sqrt(lambda_beta)


def compute_alpha(lambda_alpha: float, sigma2_w: float) -> float:
    x = sigma2_w * lambda_alpha
    if not 0 < x < 1:
        raise NumericalError(
            f"alpha undefined: sigma2_w * lambda_alpha = {x!r} is outside (0, 1)"
        )
    return 1.0 / (1.0 - x)


def random_wishart_factors(spec: WishartSpec, draws: int, rng: np.random.Generator):
    """Yield chunks of i.i.d. ``(chunk, M, K)`` unit-variance Gaussian matrices."""
    left = draws
    while left > 0:
        n = min(_CHUNK, left)
        yield complex_normal(rng, (n, spec.M, spec.K))
        left -= n


def _estimate(samples: np.ndarray) -> MonteCarloEstimate:
    if samples.size < 2:
        return MonteCarloEstimate(float(samples.mean()), float("nan"))
    return MonteCarloEstimate(
        float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(samples.size))
    )


def monte_carlo_lambdas(
    spec: WishartSpec, sigma2_w: float, draws: int = DEFAULT_DRAWS, seed: int = 0
) -> tuple[MonteCarloEstimate, MonteCarloEstimate]:
    """Sample estimates of ``(lambda_alpha, lambda_beta)`` from explicit matrices.

    Per draw: ``tr[(W + s2 I)^-1] / K`` and ``tr[B^H B] / K`` with
    ``B = A* (W + s2 I)^-1``.  Independent of the density and the quadrature.
    """
    s2 = _check_sigma2(sigma2_w)
    rng = stream(seed, spec.M, spec.K)
    eye = np.eye(spec.K)
    la, lb = [], []
    for A in random_wishart_factors(spec, draws, rng):
        Ac = A.conj()
        inv = np.linalg.inv(np.swapaxes(A, -1, -2) @ Ac + s2 * eye)
        B = Ac @ inv
        la.append(np.trace(inv, axis1=-2, axis2=-1).real / spec.K)
        lb.append(np.sum(np.abs(B) ** 2, axis=(-2, -1)) / spec.K)
    return _estimate(np.concatenate(la)), _estimate(np.concatenate(lb))


def _offdiag_samples(spec: WishartSpec, sigma2_grid, draws: int, seed: int) -> np.ndarray:
    """Per-draw mean ``|G_ij|**2`` over ``i != j``, for every noise variance.

    ``G = W (W + s2 I)^-1 = U diag(z/(z+s2)) U^H`` so one eigendecomposition
    per draw serves the whole grid.  Returns shape ``(draws, len(grid))``.
    """
    K = spec.K
    s2 = np.asarray(sigma2_grid, dtype=float)
    if K == 1:
        return np.zeros((draws, s2.size))
    rng = stream(seed, spec.M, K)
    out = []
    for A in random_wishart_factors(spec, draws, rng):
        z, U = np.linalg.eigh(np.swapaxes(A, -1, -2) @ A.conj())
        g = z[:, None, :] / (z[:, None, :] + s2[None, :, None])  # (chunk, grid, K)
        u2 = np.abs(U) ** 2  # (chunk, row i, eig l)
        diag = np.einsum("cil,cgl->cgi", u2, g)
        off = np.sum(g**2, axis=-1) - np.sum(diag**2, axis=-1)
        out.append(np.maximum(off, 0.0) / (K * (K - 1)))
    return np.concatenate(out)


def compute_sigma2_od(
    spec: WishartSpec, sigma2_w: float, draws: int = DEFAULT_DRAWS, seed: int = 0
) -> MonteCarloEstimate:
    """Monte Carlo variance of the off-diagonal entries of ``W (W + s2 I)^-1``."""
    s2 = _check_sigma2(sigma2_w)
    if draws < 1000:
        raise ConfigError(f"sigma2_od needs at least 1000 draws, got {draws}")
    return _estimate(_offdiag_samples(spec, [s2], draws, seed)[:, 0])


@dataclass(frozen=True)
class ScalarEntry:
    K: int
    snr_db: float
    sigma2_w: float
    lambda_beta: float
    beta_rzf: float
    lambda_alpha: float
    alpha: float
    sigma2_od: float
    sigma2_od_stderr: float = 0.0


def compute_entry(
    spec: WishartSpec, snr_db: float, draws: int = DEFAULT_DRAWS, seed: int = 0
) -> ScalarEntry:
    """All tabulated scalars for one ``(K, SNR)`` point."""
    s2 = float(snr_to_sigma2(snr_db))
    lb = compute_lambda_beta(spec, s2)
    la = compute_lambda_alpha(spec, s2)
    od = compute_sigma2_od(spec, s2, draws, seed)
    return ScalarEntry(
        spec.K, float(snr_db), s2, lb, compute_beta_rzf(lb), la,
        compute_alpha(la, s2), od.value, od.stderr,
    )


@dataclass(frozen=True, eq=False)
class ScalarTable:
    """Dense ``(K, SNR)`` grid of scale factors for a fixed antenna count."""

    M: int
    k_values: tuple[int, ...]
    snr_db: np.ndarray
    data: np.ndarray  # (n_k, n_snr, len(FIELDS))
    draws: int = DEFAULT_DRAWS
    seed: int = 0

    def __post_init__(self):
        snr = np.asarray(self.snr_db, dtype=float)
        data = np.asarray(self.data, dtype=float)
        if data.shape != (len(self.k_values), snr.size, len(FIELDS)):
            raise ConfigError(f"table data has shape {data.shape}, grid is incomplete")
        snr.setflags(write=False)
        data.setflags(write=False)
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(self, "snr_db", snr)
        object.__setattr__(self, "data", data)

    def field(self, name: str) -> np.ndarray:
        return self.data[..., FIELDS.index(name)]

    def entry(self, k_index: int, snr_index: int) -> ScalarEntry:
        row = self.data[k_index, snr_index]
        return ScalarEntry(
            self.k_values[k_index], float(self.snr_db[snr_index]), *map(float, row)
        )

    def covers(self, K: int, snr_db: Sequence[float]) -> bool:
        if K not in self.k_values or self.snr_db.size == 0:
            return False
        snr = np.asarray(snr_db, dtype=float)
        return bool(np.all((snr >= self.snr_db[0] - 1e-9) & (snr <= self.snr_db[-1] + 1e-9)))


def _check_grid(values, name):
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ConfigError(f"{name} grid is empty")
    if np.any(np.diff(arr) <= 0):
        raise ConfigError(f"{name} grid must be strictly increasing: {list(values)}")
    return arr


def build_table(
    M: int,
    k_values: Sequence[int],
    snr_grid_db: Sequence[float],
    draws: int = DEFAULT_DRAWS,
    seed: int = 0,
) -> ScalarTable:
    """Tabulate every scalar over the ``(K, SNR)`` grid.

    The off-diagonal Monte Carlo reuses one set of draws per ``K`` (stream
    derived from ``(seed, M, K)``) across the whole SNR axis, so a one-point
    table reproduces :func:`compute_entry` exactly and results do not depend
    on evaluation order.
    """
    _check_grid(k_values, "K")
    snr = _check_grid(snr_grid_db, "SNR")
    s2 = snr_to_sigma2(snr)
    if draws < 1000:
        raise ConfigError(f"sigma2_od needs at least 1000 draws, got {draws}")
    data = np.empty((len(k_values), snr.size, len(FIELDS)))
    for i, K in enumerate(k_values):
        spec = WishartSpec(M, int(K))
        od = _offdiag_samples(spec, s2, draws, seed)
        od_mean = od.mean(axis=0)
        od_se = od.std(axis=0, ddof=1) / math.sqrt(draws)
        for j, sigma2 in enumerate(s2):
            try:
                lb = compute_lambda_beta(spec, sigma2)
                la = compute_lambda_alpha(spec, sigma2)
                alpha = compute_alpha(la, sigma2)
            except NumericalError as exc:
                raise NumericalError(f"table point K={K}, snr_db={snr[j]:g}: {exc}") from exc
            data[i, j] = (sigma2, lb, compute_beta_rzf(lb), la, alpha, od_mean[j], od_se[j])
        _check_monotone(spec, snr, data[i])
    return ScalarTable(M, tuple(int(k) for k in k_values), snr, data, draws, seed)


def _check_monotone(spec: WishartSpec, snr: np.ndarray, rows: np.ndarray) -> None:
    # along increasing SNR (decreasing s2) both lambdas rise and alpha falls
    if rows.shape[0] < 2:
        return
    for name, sign in (("lambda_alpha", 1), ("lambda_beta", 1), ("alpha", -1)):
        d = sign * np.diff(rows[:, FIELDS.index(name)])
        if np.any(d <= 0):
            j = int(np.argmax(d <= 0))
            raise NumericalError(
                f"{name} not monotone for M={spec.M}, K={spec.K} "
                f"between {snr[j]:g} and {snr[j + 1]:g} dB"
            )


def lookup(table: ScalarTable, K: int, sigma2_w: float) -> ScalarEntry:
    """Scalars for ``(K, sigma2_w)``; exact at grid points, linear in dB between."""
    if K not in table.k_values:
        raise TableRangeError(f"K={K} not tabulated; available K: {list(table.k_values)}")
    s2 = _check_sigma2(sigma2_w)
    i = table.k_values.index(K)
    snr = -10.0 * math.log10(s2)
    grid = table.snr_db
    tol = 1e-9
    if grid.size == 0 or snr < grid[0] - tol or snr > grid[-1] + tol:
        lo, hi = (grid[0], grid[-1]) if grid.size else (float("nan"),) * 2
        raise TableRangeError(
            f"SNR {snr:.6g} dB (sigma2_w={s2:.6g}) outside table range [{lo:g}, {hi:g}] dB"
        )
    j = int(np.argmin(np.abs(grid - snr)))
    if abs(grid[j] - snr) <= tol:
        return table.entry(i, j)
    j = int(np.searchsorted(grid, snr)) - 1
    t = (snr - grid[j]) / (grid[j + 1] - grid[j])
    row = (1.0 - t) * table.data[i, j] + t * table.data[i, j + 1]
    row[FIELDS.index("sigma2_w")] = s2
    return ScalarEntry(K, snr, *map(float, row))


_BIN_HEADER = struct.Struct("<4sHHIIIIQ")
_BIN_MAGIC = b"RZFT"


def save_table(table: ScalarTable, path: str | Path) -> Path:
    path = Path(path)
    header = _BIN_HEADER.pack(
        _BIN_MAGIC, FORMAT_VERSION, 0, table.M, len(table.k_values),
        table.snr_db.size, table.draws, table.seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(table.k_values, dtype="<i4").tobytes())
        fh.write(table.snr_db.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(table.data, dtype="<f8").tobytes())
    return path


def load_table(path: str | Path) -> ScalarTable:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise ConfigError(f"{path}: truncated table file")
    magic, version, _, M, n_k, n_snr, draws, seed = _BIN_HEADER.unpack_from(raw)
    if magic != _BIN_MAGIC:
        raise ConfigError(f"{path}: not a scalar table (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported table format version {version}")
    off = _BIN_HEADER.size
    k_values = np.frombuffer(raw, "<i4", n_k, off)
    off += 4 * n_k
    snr = np.frombuffer(raw, "<f8", n_snr, off)
    off += 8 * n_snr
    count = n_k * n_snr * len(FIELDS)
    if len(raw) != off + 8 * count:
        raise ConfigError(f"{path}: size does not match header")
    data = np.frombuffer(raw, "<f8", count, off).reshape(n_k, n_snr, len(FIELDS))
    return ScalarTable(M, tuple(k_values.tolist()), snr.copy(), data.copy(), draws, seed)


def write_table_csv(table: ScalarTable, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(
            f"# rzf-scalar-table version={FORMAT_VERSION} M={table.M} "
            f"draws={table.draws} seed={table.seed}\n"
        )
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for i, K in enumerate(table.k_values):
            for j, snr in enumerate(table.snr_db):
                writer.writerow([K, repr(float(snr))] + [repr(float(v)) for v in table.data[i, j]])
    return path


def read_table_csv(path: str | Path) -> ScalarTable:
    path = Path(path)
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        key, val = tok.split("=", 1)
                        meta[key] = val
            else:
                lines.append(line)
        reader = csv.DictReader(lines)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = list(reader)
    if "M" not in meta:
        raise ConfigError(f"{path}: missing 'M=' metadata line")
    k_values = sorted({int(r["K"]) for r in rows})
    snr = sorted({float(r["snr_db"]) for r in rows})
    data = np.full((len(k_values), len(snr), len(FIELDS)), np.nan)
    for r in rows:
        i = k_values.index(int(r["K"]))
        j = snr.index(float(r["snr_db"]))
        data[i, j] = [float(r[f]) for f in FIELDS]
    if np.isnan(data).any():
        raise ConfigError(f"{path}: table grid has holes")
    return ScalarTable(
        int(meta["M"]), tuple(k_values), np.array(snr), data,
        int(meta.get("draws", DEFAULT_DRAWS)), int(meta.get("seed", 0)),
    )
