"""Command-line front end.

    rzfprecode tables     [--config FILE] [--out DIR] ...
    rzfprecode simulate   [--config FILE] [--table PATH] ...
    rzfprecode complexity [--config FILE] [--out DIR]
    rzfprecode validate   [--config FILE] [--inject-alpha-error FRAC]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 invariant/validation failure, 5 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .channel import PowerDelayProfile, generate_channel
from .errors import ConfigError, InvariantError, RZFError
from .harness import (
    SystemConfig,
    check_invariants,
    emit_outputs,
    plot_complexity,
    run_sweep,
    validate_fd_model,
)
from .precoder import (
    PowerAllocation,
    complexity_grid,
    complexity_report,
    rzf_precode_bin,
    rzf_precode_full,
    write_complexity_csv,
)
from .scalars import (
    FIELDS,
    ScalarTable,
    WishartSpec,
    build_table,
    compute_lambda_alpha,
    compute_lambda_beta,
    load_table,
    monte_carlo_lambdas,
    pdf_moment,
    read_table_csv,
    save_table,
    snr_to_sigma2,
    write_table_csv,
)

EXIT_IO = 5

# keys accepted in a config file besides the SystemConfig fields
EXTRA_KEYS = {
    "snr_start": -20.0,
    "snr_end": 30.0,
    "snr_step": 1.0,
    "table": None,
    "table_k_values": None,
    "table_draws": 10_000,
    "table_seed": 0,
    "complexity_m_values": [32, 64, 128],
    "validate_fd": False,
    "validate_draws": 2000,
    "workers": 1,
}


@dataclasses.dataclass
class RunManifest:
    command: str
    system: SystemConfig
    extras: dict
    out_dir: Path
    config_path: Path | None = None


def _snr_grid(start: float, end: float, step: float) -> tuple[float, ...]:
    if step <= 0:
        raise ConfigError(f"snr step must be positive, got {step}")
    n = int(math.floor((end - start) / step + 1e-9)) + 1
    if n < 0:
        raise ConfigError(f"empty SNR range {start}..{end}")
    return tuple(round(start + i * step, 10) for i in range(max(n, 0)))


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of keys to values")
    return data


def build_manifest(args: argparse.Namespace) -> RunManifest:
    raw = load_config_file(args.config) if args.config else {}
    system_keys = {f.name for f in dataclasses.fields(SystemConfig)}
    unknown = set(raw) - system_keys - set(EXTRA_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")

    overrides = {
        "seed": args.seed, "M": args.m, "K": args.k, "N": args.n,
        "frames_per_point": args.frames,
        "snr_start": args.snr_start, "snr_end": args.snr_end, "snr_step": args.snr_step,
        "table": getattr(args, "table", None),
        "workers": args.workers,
    }
    if args.precoder is not None:
        overrides["precoders"] = ["zf", "rzf"] if args.precoder == "both" else [args.precoder]
    if args.power_opt is not None:
        overrides["power_opt"] = args.power_opt == "on"
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    if getattr(args, "draws", None) is not None:
        raw["table_draws" if args.command == "tables" else "validate_draws"] = args.draws
    if getattr(args, "k_values", None):
        raw["table_k_values"] = args.k_values

    extras = {key: raw.pop(key, default) for key, default in EXTRA_KEYS.items()}
    if "snr_db_grid" not in raw or any(
        k in overrides and overrides[k] is not None for k in ("snr_start", "snr_end", "snr_step")
    ):
        raw["snr_db_grid"] = _snr_grid(extras["snr_start"], extras["snr_end"], extras["snr_step"])
    try:
        system = SystemConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    out_dir = Path(args.out)
    return RunManifest(args.command, system, extras, out_dir, Path(args.config) if args.config else None)


def _echo(manifest: RunManifest, name: str = "run_config.json") -> None:
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": manifest.command,
        "version": __version__,
        "config_hash": manifest.system.config_hash(),
        "seed": manifest.system.seed,
        "system": manifest.system.to_dict(),
        "extras": {k: v for k, v in manifest.extras.items()},
    }
    (manifest.out_dir / name).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    print(f"config_hash={doc['config_hash']} seed={doc['seed']}")


def table_k_values(manifest: RunManifest) -> list[int]:
    cfg = manifest.system
    ks = manifest.extras["table_k_values"]
    if ks is None:
        ks = sorted({k for k in (4, 8, 16, 32) if k < cfg.M} | {cfg.K})
    ks = sorted(int(k) for k in ks)
    bad = [k for k in ks if not cfg.M > k >= 1]
    if bad:
        raise ConfigError(f"table K values {bad} are not in [1, M={cfg.M})")
    return ks


def default_table_path(manifest: RunManifest) -> Path:
    return manifest.out_dir / f"scalar_table_M{manifest.system.M}.bin"


def read_any_table(path: Path) -> ScalarTable:
    return read_table_csv(path) if path.suffix.lower() == ".csv" else load_table(path)


def cmd_tables(manifest: RunManifest) -> int:
    cfg = manifest.system
    ks = table_k_values(manifest)
    if not cfg.snr_db_grid:
        raise ConfigError("SNR grid is empty")
    _echo(manifest, "tables_config.json")
    table = build_table(
        cfg.M, ks, cfg.snr_db_grid,
        draws=int(manifest.extras["table_draws"]), seed=int(manifest.extras["table_seed"]),
    )
    bin_path = save_table(table, default_table_path(manifest))
    csv_path = write_table_csv(table, bin_path.with_suffix(".csv"))
    print(f"wrote {bin_path} and {csv_path}")

    alpha = table.field("alpha")
    beta = table.field("beta_rzf")
    print(f"alpha range: [{alpha.min():.6g}, {alpha.max():.6g}]")
    s2_lo, s2_hi = snr_to_sigma2(table.snr_db[0]), snr_to_sigma2(table.snr_db[-1])
    for i, K in enumerate(table.k_values):
        lo_ref = s2_lo / math.sqrt(cfg.M)
        hi_ref = math.sqrt(cfg.M - K)
        print(
            f"K={K:3d}  beta_rzf@{table.snr_db[0]:+g} dB = {beta[i, 0]:.6g} "
            f"(s2/sqrt(M) = {lo_ref:.6g}, {100 * (beta[i, 0] / lo_ref - 1):+.2f}%)  "
            f"beta_rzf@{table.snr_db[-1]:+g} dB = {beta[i, -1]:.6g} "
            f"(sqrt(M-K) = {hi_ref:.6g}, {100 * (beta[i, -1] / hi_ref - 1):+.2f}%)"
        )
    return 0


def cmd_simulate(manifest: RunManifest) -> int:
    cfg = manifest.system
    table = None
    if "rzf" in cfg.precoders:
        path = Path(manifest.extras["table"]) if manifest.extras["table"] else default_table_path(manifest)
        if not path.exists():
            raise ConfigError(
                f"scalar table not found at {path}; build it first with "
                f"`rzfprecode tables --out {manifest.out_dir}` or pass --table"
            )
        table = read_any_table(path)
    _echo(manifest)

    def progress(done, total):
        print(f"\r  SNR point {done}/{total}", end="", file=sys.stderr, flush=True)

    result = run_sweep(cfg, table, workers=int(manifest.extras["workers"]), progress=progress)
    print(file=sys.stderr)
    paths = emit_outputs(result, manifest.out_dir)
    for pt in result.points:
        print(f"{pt.precoder:>4s} {pt.snr_db:+7.2f} dB  gain {pt.mean_gain_db:7.3f} dB  (+/- {pt.stderr_db:.3f})")
    for key, path in paths.items():
        print(f"wrote {path}")

    failures = check_invariants(result)
    if manifest.extras["validate_fd"]:
        small = dataclasses.replace(cfg, N=64, L_h=min(cfg.L_h, 8), L_cp=min(cfg.L_h, 8) + 1)
        real = generate_channel(small.M, small.K, small.N, small.pdp, cfg.seed, small.antenna_power_range)
        report = validate_fd_model(small, real, seed=cfg.seed, raise_on_mismatch=False)
        print(f"FD model check: max |diff| = {report.max_abs_diff:.3g}")
        if not report.passed:
            failures.append(f"FD model mismatch {report.max_abs_diff:.3g}")
    if failures:
        raise InvariantError("; ".join(failures))
    return 0


def cmd_complexity(manifest: RunManifest) -> int:
    cfg = manifest.system
    m_values = [int(m) for m in manifest.extras["complexity_m_values"]]
    reports = complexity_grid(m_values)
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_complexity_csv(reports, manifest.out_dir / "complexity.csv")
    plot_path = plot_complexity(reports, manifest.out_dir / "complexity_vs_k.svg")
    r = complexity_report(cfg.M, cfg.K)
    print(f"M={r.M} K={r.K}: ZF {r.zf_multiplies_per_bin} vs RZF {r.rzf_multiplies_per_bin} "
          f"complex multiplies per bin (ratio {r.ratio:.2f})")
    print(f"wrote {csv_path} and {plot_path}")
    return 0


def _check(name: str, ok: bool, detail: str, results: list) -> None:
    results.append(ok)
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def cmd_validate(manifest: RunManifest, inject_alpha_error: float = 0.0) -> int:
    cfg = manifest.system
    results: list[bool] = []
    spec = WishartSpec(cfg.M, cfg.K)

    small = dataclasses.replace(cfg, N=64, L_h=8, L_cp=9, snr_db_grid=())
    real = generate_channel(small.M, small.K, small.N, PowerDelayProfile(8, cfg.rolloff), cfg.seed)
    rep = validate_fd_model(small, real, seed=cfg.seed, raise_on_mismatch=False)
    _check("fd-model", rep.passed, f"N=64 max |diff| {rep.max_abs_diff:.3g} (tol 1e-9)", results)

    norm = pdf_moment(spec, 0)
    _check("pdf-normalization", abs(norm - 1) < 1e-8, f"integral f = {norm!r}", results)
    mean = pdf_moment(spec, 1)
    _check("pdf-mean", abs(mean / cfg.M - 1) < 1e-6, f"integral z f = {mean!r} (M={cfg.M})", results)

    draws = int(manifest.extras["validate_draws"])
    for s2 in (0.1, 1.0, 10.0):
        mc_a, mc_b = monte_carlo_lambdas(spec, s2, draws, seed=cfg.seed)
        la, lb = compute_lambda_alpha(spec, s2), compute_lambda_beta(spec, s2)
        za, zb = abs(la - mc_a.value) / mc_a.stderr, abs(lb - mc_b.value) / mc_b.stderr
        _check(f"lambda-mc s2={s2:g}", za < 3 and zb < 3,
               f"lambda_alpha {la:.6g} vs {mc_a.value:.6g} ({za:.2f} se); "
               f"lambda_beta {lb:.6g} vs {mc_b.value:.6g} ({zb:.2f} se)", results)

    rng = np.random.default_rng(cfg.seed)
    A = rng.standard_normal((20, 8, 3)) + 1j * rng.standard_normal((20, 8, 3))
    s = rng.standard_normal((20, 3)) + 1j * rng.standard_normal((20, 3))
    alloc = PowerAllocation.unoptimized(rng.uniform(0.5, 2.0, 3))
    x10 = rzf_precode_bin(A, s, alloc, 0.3, 1.7)
    x9 = rzf_precode_full(A, s, alloc, 0.3, 1.7)
    err = float(np.max(np.abs(x10 - x9)) / np.max(np.abs(x9)))
    _check("inversion-lemma", err < 1e-9, f"K x K vs M x M forms, rel diff {err:.3g}", results)

    snrs = (-10.0, 0.0, 10.0, 20.0)
    bias_cfg = dataclasses.replace(
        cfg, N=64, L_h=8, L_cp=9, snr_db_grid=snrs, frames_per_point=100,
        precoders=("rzf",), power_opt=False, excess_path_loss_db=(0.0, 0.0),
    )
    table = build_table(cfg.M, [cfg.K], snrs, draws=1000, seed=cfg.seed)
    if inject_alpha_error:
        data = table.data.copy()
        data[..., FIELDS.index("alpha")] *= 1.0 + inject_alpha_error
        table = ScalarTable(table.M, table.k_values, table.snr_db, data, table.draws, table.seed)
        print(f"(debug) alpha perturbed by {inject_alpha_error:+.1%}")
    res = run_sweep(bias_cfg, table)
    for pt in res.points:
        pooled = abs(np.mean(pt.per_user_bias) - 1.0)
        _check(f"rzf-bias {pt.snr_db:+g} dB", pooled < 0.02, f"|bias - 1| = {pooled:.4f} (tol 0.02)", results)

    failed = results.count(False)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    if failed:
        raise InvariantError(f"{failed} validation check(s) failed")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rzfprecode",
        description="Frequency-domain ZF/RZF precoding for single-carrier massive MIMO.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--m", type=int, help="BS antennas M")
    common.add_argument("--k", type=int, help="users K")
    common.add_argument("--n", type=int, help="frame length N")
    common.add_argument("--snr-start", type=float)
    common.add_argument("--snr-end", type=float)
    common.add_argument("--snr-step", type=float)
    common.add_argument("--frames", type=int, help="frames per SNR point")
    common.add_argument("--precoder", choices=["zf", "rzf", "both"])
    common.add_argument("--power-opt", choices=["on", "off"])
    common.add_argument("--workers", type=int, help="processes for the SNR sweep")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("tables", parents=[common], help="build the scalar look-up table")
    p.add_argument("--draws", type=int, help="Monte Carlo draws for sigma2_od")
    p.add_argument("--k-values", type=int, nargs="+", help="K values to tabulate")
    p = sub.add_parser("simulate", parents=[common], help="run the SNR sweep")
    p.add_argument("--table", help="scalar table (.bin or .csv)")
    sub.add_parser("complexity", parents=[common], help="complex-multiply counts vs K")
    p = sub.add_parser("validate", parents=[common], help="model and scalar self-checks")
    p.add_argument("--draws", type=int, help="Monte Carlo draws for the scalar cross-check")
    p.add_argument("--inject-alpha-error", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        manifest = build_manifest(args)
        if args.command == "tables":
            return cmd_tables(manifest)
        if args.command == "simulate":
            return cmd_simulate(manifest)
        if args.command == "complexity":
            return cmd_complexity(manifest)
        return cmd_validate(manifest, args.inject_alpha_error)
    except RZFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
