"""Monte Carlo link simulation: SNR sweeps, model validation and result files.

One frame at one SNR point is fully determined by ``(seed, snr_index,
frame_index)``: channel, path losses, symbols and noise each come from their
own substream, and every precoder in the run sees the same draws.
Aggregation is a fixed-order reduction, so serial and parallel runs agree
bit for bit.

Per-user statistics are reported by path-loss *rank* (rank 0 is the
strongest user of each frame), since path losses are redrawn every frame.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _rng
from .channel import ChannelRealization, PowerDelayProfile, fd, generate_channel, td
from .detector import measure_sinr, time_domain_symbols, ue_scale
from .errors import ConfigError, InvariantError
from .precoder import (
    ComplexityReport,
    PowerAllocation,
    UplinkInverse,
    beta_zf,
    complexity_grid,
    complexity_report,
    gram,
    optimize_powers,
    rzf_precode_bin,
    write_complexity_csv,
    zf_precode_bin,
)
from .scalars import ScalarEntry, ScalarTable, lookup, snr_to_sigma2

PRECODERS = ("zf", "rzf")
MODULATIONS = ("qpsk", "16qam", "64qam")
TX_POWER_TOL = 0.05


@dataclass(frozen=True)
class SystemConfig:
    """Simulation parameters.  Defaults are the 64-antenna, 16-user reference setup."""

    M: int = 64
    K: int = 16
    N: int = 2048
    L_h: int = 130
    L_cp: int = 160
    rolloff: float = 25.0
    snr_db_grid: tuple[float, ...] = tuple(float(x) for x in range(-20, 31))
    frames_per_point: int = 50
    precoders: tuple[str, ...] = PRECODERS
    power_opt: bool = True
    excess_path_loss_db: tuple[float, float] = (0.0, 20.0)
    antenna_power_range: tuple[float, float] | None = (0.1, 2.0)
    modulation: str = "qpsk"
    seed: int = 1

    def __post_init__(self):
        for name in ("M", "K", "N", "L_h", "L_cp", "frames_per_point", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if not self.M > self.K >= 1:
            raise ConfigError(f"need M > K >= 1, got M={self.M}, K={self.K}")
        if not 1 <= self.L_h <= self.L_cp - 1 <= self.N:
            raise ConfigError(
                f"need 1 <= L_h <= L_cp - 1 <= N, got L_h={self.L_h}, "
                f"L_cp={self.L_cp}, N={self.N}"
            )
        if self.frames_per_point < 1:
            raise ConfigError("frames_per_point must be at least 1")
        if not self.rolloff > 0:
            raise ConfigError("rolloff must be positive")
        precoders = tuple(str(p).lower() for p in self.precoders)
        unknown = set(precoders) - set(PRECODERS)
        if not precoders or unknown:
            raise ConfigError(f"precoders must be a non-empty subset of {PRECODERS}")
        object.__setattr__(self, "precoders", tuple(p for p in PRECODERS if p in precoders))
        grid = tuple(float(x) for x in self.snr_db_grid)
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("snr_db_grid must be strictly increasing")
        object.__setattr__(self, "snr_db_grid", grid)
        lo, hi = (float(x) for x in self.excess_path_loss_db)
        if not 0 <= lo <= hi:
            raise ConfigError(f"invalid excess path loss range {self.excess_path_loss_db}")
        object.__setattr__(self, "excess_path_loss_db", (lo, hi))
        if self.antenna_power_range is not None:
            a, b = (float(x) for x in self.antenna_power_range)
            if not 0 < a <= b:
                raise ConfigError(f"invalid antenna power range {self.antenna_power_range}")
            object.__setattr__(self, "antenna_power_range", (a, b))
        if self.modulation not in MODULATIONS:
            raise ConfigError(f"modulation must be one of {MODULATIONS}")
        object.__setattr__(self, "power_opt", bool(self.power_opt))

    @property
    def pdp(self) -> PowerDelayProfile:
        return PowerDelayProfile(self.L_h, self.rolloff)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("snr_db_grid", "precoders", "excess_path_loss_db", "antenna_power_range"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def modulate(rng: np.random.Generator, modulation: str, shape) -> np.ndarray:
    """Unit-average-power square QAM symbols."""
    order = {"qpsk": 4, "16qam": 16, "64qam": 64}[modulation]
    side = int(round(math.sqrt(order)))
    levels = 2.0 * np.arange(side) - (side - 1)
    norm = math.sqrt(2.0 * np.mean(levels**2))
    re = levels[rng.integers(0, side, size=shape)]
    im = levels[rng.integers(0, side, size=shape)]
    return (re + 1j * im) / norm


def draw_path_loss(rng: np.random.Generator, K: int, excess_db: tuple[float, float]) -> np.ndarray:
    """Linear path-loss powers ``p_k`` with excess loss uniform in dB."""
    return 10.0 ** (rng.uniform(excess_db[0], excess_db[1], size=K) / 10.0)


@dataclass
class FrameStats:
    sinr: np.ndarray  # by path-loss rank
    bias: np.ndarray  # by path-loss rank
    tx_power_ratio: float


def simulate_frame(
    cfg: SystemConfig,
    snr_index: int,
    frame_index: int,
    entry: ScalarEntry | None,
) -> dict[str, FrameStats]:
    """Run one frame through every configured precoder."""
    snr_db = cfg.snr_db_grid[snr_index]
    s2 = float(snr_to_sigma2(snr_db))
    key = (snr_index, frame_index)
    realization = generate_channel(
        cfg.M, cfg.K, cfg.N, cfg.pdp,
        _rng.stream(cfg.seed, *key, _rng.CHANNEL), cfg.antenna_power_range,
    )
    A = realization.bins
    p = draw_path_loss(_rng.stream(cfg.seed, *key, _rng.PATH_LOSS), cfg.K, cfg.excess_path_loss_db)
    s_td = modulate(_rng.stream(cfg.seed, *key, _rng.SYMBOLS), cfg.modulation, (cfg.N, cfg.K))
    s_fd = fd(s_td, axis=0)
    w_fd = fd(_rng.complex_normal(_rng.stream(cfg.seed, *key, _rng.NOISE), (cfg.N, cfg.K), s2), axis=0)

    G = gram(A)
    order = np.argsort(p, kind="stable")
    out = {}
    for name in cfg.precoders:
        if name == "zf":
            alloc = PowerAllocation.unoptimized(p)
            beta = beta_zf(cfg.M, cfg.K)
            x = zf_precode_bin(A, s_fd, alloc, beta, dl_gram=G)
            scale = ue_scale(alloc, 1.0, beta)
        else:
            if cfg.power_opt:
                alloc = optimize_powers(p, entry.sigma2_od, entry.beta_rzf, s2)
            else:
                alloc = PowerAllocation.unoptimized(p)
            inverse = UplinkInverse.from_channel(A, s2, dl_gram=G)
            x = rzf_precode_bin(A, s_fd, alloc, s2, entry.beta_rzf, inverse=inverse)
            scale = ue_scale(alloc, entry.alpha, entry.beta_rzf)
        r = (np.swapaxes(A, -1, -2) @ x[..., None])[..., 0] / np.sqrt(p) + w_fd
        det = measure_sinr(s_td, time_domain_symbols(r * scale))
        tx = float(np.mean(np.sum(np.abs(x) ** 2, axis=-1)) / alloc.p_total)
        out[name] = FrameStats(det.sinr[order], det.bias[order], tx)
    return out


@dataclass
class PointResult:
    precoder: str
    snr_db: float
    mean_gain_db: float
    stderr_db: float
    mean_gain_db_logavg: float
    per_user_sinr_db: list[float]
    per_user_bias: list[complex]
    sinr_q05_db: float
    sinr_q50_db: float
    sinr_q95_db: float
    tx_power_ratio: float
    frames: int

    @property
    def mean_sinr_db(self) -> float:
        return self.mean_gain_db + self.snr_db

    @property
    def rank_spread_db(self) -> float:
        return max(self.per_user_sinr_db) - min(self.per_user_sinr_db)

    @property
    def max_bias_error(self) -> float:
        return max(abs(b - 1.0) for b in self.per_user_bias)


@dataclass
class SimResult:
    config: SystemConfig
    points: list[PointResult]
    complexity: ComplexityReport
    seed: int
    config_hash: str = field(default="")

    def point(self, precoder: str, snr_db: float) -> PointResult:
        for pt in self.points:
            if pt.precoder == precoder and math.isclose(pt.snr_db, snr_db, abs_tol=1e-9):
                return pt
        raise KeyError((precoder, snr_db))

    def curve(self, precoder: str) -> list[PointResult]:
        return [pt for pt in self.points if pt.precoder == precoder]


def _aggregate(name: str, snr_db: float, stats: list[FrameStats]) -> PointResult:
    sinr = np.array([s.sinr for s in stats])  # (frames, K)
    frame_means = sinr.mean(axis=1)
    mean = float(frame_means.mean())
    if len(stats) > 1:
        se = float(frame_means.std(ddof=1) / math.sqrt(len(stats)))
    else:
        se = 0.0
    sinr_db = 10.0 * np.log10(sinr)
    q05, q50, q95 = np.quantile(sinr_db, [0.05, 0.5, 0.95])
    bias = np.array([s.bias for s in stats]).mean(axis=0)
    return PointResult(
        precoder=name,
        snr_db=snr_db,
        mean_gain_db=float(10.0 * math.log10(mean) - snr_db),
        stderr_db=float(10.0 / math.log(10.0) * se / mean),
        mean_gain_db_logavg=float(sinr_db.mean() - snr_db),
        per_user_sinr_db=[float(v) for v in 10.0 * np.log10(sinr.mean(axis=0))],
        per_user_bias=[complex(b) for b in bias],
        sinr_q05_db=float(q05),
        sinr_q50_db=float(q50),
        sinr_q95_db=float(q95),
        tx_power_ratio=float(np.mean([s.tx_power_ratio for s in stats])),
        frames=len(stats),
    )


def _simulate_point(cfg: SystemConfig, snr_index: int, entry: ScalarEntry | None) -> list[PointResult]:
    frames = [simulate_frame(cfg, snr_index, f, entry) for f in range(cfg.frames_per_point)]
    snr_db = cfg.snr_db_grid[snr_index]
    return [_aggregate(name, snr_db, [fr[name] for fr in frames]) for name in cfg.precoders]


def check_table_coverage(cfg: SystemConfig, table: ScalarTable | None) -> None:
    if "rzf" not in cfg.precoders or not cfg.snr_db_grid:
        return
    if table is None:
        raise ConfigError("RZF simulation needs a scalar table (build one with the 'tables' command)")
    if table.M != cfg.M:
        raise ConfigError(f"scalar table is for M={table.M}, configuration has M={cfg.M}")
    if not table.covers(cfg.K, cfg.snr_db_grid):
        raise ConfigError(
            f"scalar table (K={list(table.k_values)}, SNR {table.snr_db.min() if table.snr_db.size else 'n/a'}"
            f"..{table.snr_db.max() if table.snr_db.size else 'n/a'} dB) does not cover "
            f"K={cfg.K} over SNR {min(cfg.snr_db_grid, default=0)}..{max(cfg.snr_db_grid, default=0)} dB"
        )


def run_sweep(
    cfg: SystemConfig,
    table: ScalarTable | None = None,
    workers: int = 1,
    progress=None,
) -> SimResult:
    """Simulate every (SNR point, precoder) pair of ``cfg``.

    ``workers > 1`` spreads SNR points over processes; results are identical
    to a serial run.  ``progress`` is called with ``(done, total)`` after each
    SNR point.
    """
    check_table_coverage(cfg, table)
    entries = [
        lookup(table, cfg.K, float(snr_to_sigma2(snr))) if "rzf" in cfg.precoders else None
        for snr in cfg.snr_db_grid
    ]
    n = len(cfg.snr_db_grid)
    per_point: list[list[PointResult]] = []
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_simulate_point, cfg, i, entries[i]) for i in range(n)]
            for i, fut in enumerate(futures):
                per_point.append(fut.result())
                if progress:
                    progress(i + 1, n)
    else:
        for i in range(n):
            per_point.append(_simulate_point(cfg, i, entries[i]))
            if progress:
                progress(i + 1, n)
    points = [pt for name in cfg.precoders for group in per_point for pt in group if pt.precoder == name]
    return SimResult(cfg, points, complexity_report(cfg.M, cfg.K), cfg.seed, cfg.config_hash())


def check_invariants(result: SimResult, tx_power_tol: float = TX_POWER_TOL) -> list[str]:
    """Hard run-level checks; returns a list of failure messages (empty when clean)."""
    failures = []
    for pt in result.points:
        if not np.isfinite(pt.mean_gain_db):
            failures.append(f"{pt.precoder} @ {pt.snr_db:g} dB: non-finite gain")
        if pt.precoder == "rzf" and abs(pt.tx_power_ratio - 1.0) > tx_power_tol:
            failures.append(
                f"rzf @ {pt.snr_db:g} dB: mean transmit power is {pt.tx_power_ratio:.4f} x tr[P], "
                f"outside +/-{tx_power_tol:.0%}"
            )
    return failures


@dataclass(frozen=True)
class FDValidationReport:
    max_abs_diff: float
    tol: float
    N: int
    L_h: int
    L_cp: int

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < self.tol


def validate_fd_model(
    cfg: SystemConfig,
    realization: ChannelRealization,
    seed: int = 0,
    l_cp: int | None = None,
    tol: float = 1e-9,
    raise_on_mismatch: bool = True,
) -> FDValidationReport:
    """Compare the per-bin matrix model against an explicit time-domain frame.

    The time-domain path adds a cyclic prefix, runs a linear convolution with
    every impulse, sums over antennas, applies path loss and strips the
    prefix.  Intended for small ``N``.
    """
    L_cp = cfg.L_cp if l_cp is None else int(l_cp)
    N, M, K = realization.fft_size, realization.M, realization.K
    rng = _rng.stream(seed, 0)
    p = draw_path_loss(rng, K, cfg.excess_path_loss_db)
    s_fd = fd(modulate(rng, cfg.modulation, (N, K)), axis=0)
    x_fd = zf_precode_bin(realization.bins, s_fd, PowerAllocation.unoptimized(p), beta_zf(M, K))

    # frequency-domain model
    r_fd = (np.swapaxes(realization.bins, -1, -2) @ x_fd[..., None])[..., 0] / np.sqrt(p)
    r_model = td(r_fd, axis=0)

    # explicit time-domain path
    x_td = td(x_fd, axis=0)
    x_cp = np.concatenate([x_td[N - L_cp :], x_td]) if L_cp > 0 else x_td
    r_time = np.zeros((N, K), dtype=complex)
    for k in range(K):
        y = sum(np.convolve(x_cp[:, m], realization.impulses[m, k]) for m in range(M))
        r_time[:, k] = y[L_cp : L_cp + N] / np.sqrt(p[k])

    report = FDValidationReport(float(np.max(np.abs(r_time - r_model))), tol, N, realization.L_h, L_cp)
    if raise_on_mismatch and not report.passed:
        raise InvariantError(
            f"frequency-domain model disagrees with time-domain path: max |diff| "
            f"{report.max_abs_diff:.3g} >= {tol:g} (N={N}, L_h={realization.L_h}, L_cp={L_cp})"
        )
    return report


RESULT_COLUMNS = (
    "precoder",
    "snr_db",
    "mean_gain_db",
    "stderr_db",
    "mean_gain_db_logavg",
    "sinr_q05_db",
    "sinr_q50_db",
    "sinr_q95_db",
    "rank_spread_db",
    "max_bias_error",
    "tx_power_ratio",
    "frames",
)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _provenance(result: SimResult) -> str:
    return f"# config_hash={result.config_hash} seed={result.seed}\n"


def write_results_csv(result: SimResult, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(_provenance(result))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for pt in result.points:
            writer.writerow([_fmt(getattr(pt, c)) for c in RESULT_COLUMNS])
    return path


def write_per_user_csv(result: SimResult, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(_provenance(result))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["precoder", "snr_db", "rank", "sinr_db", "bias_re", "bias_im"])
        for pt in result.points:
            for rank, (s, b) in enumerate(zip(pt.per_user_sinr_db, pt.per_user_bias)):
                writer.writerow([pt.precoder, _fmt(pt.snr_db), rank, _fmt(s), _fmt(b.real), _fmt(b.imag)])
    return path


def _svg_metadata(result: SimResult | None, title: str) -> dict:
    desc = f"config_hash={result.config_hash} seed={result.seed}" if result else ""
    return {"Title": title, "Description": desc, "Date": None, "Creator": "rzfprecode"}


def plot_gain(result: SimResult, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    cfg = result.config
    plt.rcParams["svg.hashsalt"] = result.config_hash or "rzfprecode"
    fig, ax = plt.subplots(figsize=(6, 4))
    styles = {"rzf": ("o-", "RZF"), "zf": ("s--", "ZF")}
    for name in cfg.precoders:
        pts = result.curve(name)
        fmt, label = styles[name]
        ax.errorbar(
            [p.snr_db for p in pts], [p.mean_gain_db for p in pts],
            yerr=[2 * p.stderr_db for p in pts], fmt=fmt, ms=4, capsize=2, label=label,
        )
    ax.axhline(10 * math.log10(cfg.M), color="gray", lw=0.8, ls=":", label=f"M = {cfg.M}")
    ax.axhline(10 * math.log10(cfg.M - cfg.K), color="gray", lw=0.8, ls="-.", label=f"M - K = {cfg.M - cfg.K}")
    ax.set_xlabel("Input SNR (dB)")
    ax.set_ylabel("Output SINR / input SNR (dB)")
    ax.set_title(f"Performance gain, M={cfg.M}, K={cfg.K}")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_svg_metadata(result, "gain vs SNR"))
    plt.close(fig)
    return path


def plot_complexity(reports: Sequence[ComplexityReport], path: str | Path, result: SimResult | None = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    plt.rcParams["svg.hashsalt"] = "rzfprecode-complexity"
    fig, ax = plt.subplots(figsize=(6, 4))
    for M in sorted({r.M for r in reports}):
        rows = [r for r in reports if r.M == M]
        ks = [r.K for r in rows]
        (line,) = ax.semilogy(ks, [r.zf_multiplies_per_bin for r in rows], "-", label=f"ZF, M={M}")
        ax.semilogy(ks, [r.rzf_multiplies_per_bin for r in rows], "--", color=line.get_color(), label=f"RZF, M={M}")
    ax.set_xlabel("Number of users K")
    ax.set_ylabel("Complex multiplies per bin")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_svg_metadata(result, "complexity vs K"))
    plt.close(fig)
    return path


def emit_outputs(result: SimResult, out_dir: str | Path) -> dict[str, Path]:
    """Write result CSVs and plots into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "results": write_results_csv(result, out / "results.csv"),
            "per_user": write_per_user_csv(result, out / "per_user.csv"),
        }
        m_values = sorted({32, 64, 128, result.config.M})
        reports = complexity_grid(m_values)
        paths["complexity"] = write_complexity_csv(reports, out / "complexity.csv")
        paths["complexity_plot"] = plot_complexity(reports, out / "complexity_vs_k.svg", result)
        if result.points:
            paths["gain_plot"] = plot_gain(result, out / "gain_vs_snr.svg")
    except OSError as exc:
        raise OSError(f"could not write outputs to {out}: {exc}") from exc
    return paths
