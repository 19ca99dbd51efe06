import csv
import dataclasses

import numpy as np
import pytest

from rzfprecode.channel import ChannelRealization, PowerDelayProfile, generate_channel
from rzfprecode.errors import ConfigError, InvariantError
from rzfprecode.harness import (
    RESULT_COLUMNS,
    SystemConfig,
    check_invariants,
    emit_outputs,
    modulate,
    run_sweep,
    simulate_frame,
    validate_fd_model,
)
from rzfprecode.scalars import build_table, lookup, snr_to_sigma2


def small_cfg(**kw):
    base = dict(M=16, K=4, N=64, L_h=8, L_cp=9, snr_db_grid=(0.0, 10.0), frames_per_point=3, seed=5)
    base.update(kw)
    return SystemConfig(**base)


@pytest.fixture(scope="module")
def table16():
    return build_table(16, [4], [-10.0, 0.0, 10.0, 20.0], draws=1000)


def test_default_config_is_reference_setup():
    cfg = SystemConfig()
    assert (cfg.M, cfg.K, cfg.N, cfg.L_h) == (64, 16, 2048, 130)
    assert cfg.snr_db_grid[0] == -20 and cfg.snr_db_grid[-1] == 30 and len(cfg.snr_db_grid) == 51
    assert cfg.excess_path_loss_db == (0.0, 20.0)


@pytest.mark.parametrize(
    "kw",
    [
        dict(M=4, K=4),
        dict(L_h=9, L_cp=9),
        dict(L_cp=80),
        dict(frames_per_point=0),
        dict(precoders=("mmse",)),
        dict(precoders=()),
        dict(snr_db_grid=(1.0, 0.0)),
        dict(modulation="bpsk"),
        dict(excess_path_loss_db=(5.0, 1.0)),
        dict(M=16.5),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        small_cfg(**kw)


def test_config_round_trip_and_hash():
    cfg = small_cfg(precoders=("rzf", "zf"))
    assert cfg.precoders == ("zf", "rzf")
    back = SystemConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert small_cfg(seed=6).config_hash() != cfg.config_hash()
    with pytest.raises(ConfigError, match="unknown"):
        SystemConfig.from_dict({"M": 8, "bogus": 1})


@pytest.mark.parametrize("mod", ["qpsk", "16qam", "64qam"])
def test_modulation_unit_power(mod):
    s = modulate(np.random.default_rng(0), mod, (200_000,))
    assert np.mean(np.abs(s) ** 2) == pytest.approx(1.0, rel=0.01)


def test_fd_model_delta_channels_exact():
    M, K, N = 4, 2, 64
    imp = np.zeros((M, K, 1), dtype=complex)
    imp[:, :, 0] = np.array([[1, 0.5j], [0.3, -1], [2, 1], [-0.7, 0.1]])
    report = validate_fd_model(small_cfg(M=M, K=K, L_h=1, L_cp=2), ChannelRealization(imp, N))
    assert report.max_abs_diff < 1e-13


def test_fd_model_random_channels_agree():
    cfg = small_cfg()
    real = generate_channel(cfg.M, cfg.K, 64, PowerDelayProfile(8), 3)
    report = validate_fd_model(cfg, real)
    assert report.passed and report.max_abs_diff < 1e-9
    assert (report.N, report.L_h, report.L_cp) == (64, 8, 9)


def test_fd_model_cyclic_prefix_threshold():
    cfg = small_cfg()
    real = generate_channel(cfg.M, cfg.K, 64, PowerDelayProfile(8), 4)
    # a prefix of L_h - 1 samples already covers the channel memory
    assert validate_fd_model(cfg, real, l_cp=8).max_abs_diff < 1e-9
    assert validate_fd_model(cfg, real, l_cp=7).max_abs_diff < 1e-9
    short = validate_fd_model(cfg, real, l_cp=6, raise_on_mismatch=False)
    assert not short.passed and short.max_abs_diff > 1e-3
    with pytest.raises(InvariantError, match="disagrees"):
        validate_fd_model(cfg, real, l_cp=3)


@pytest.mark.xfail(strict=True, reason="a prefix as long as the channel is more than enough; no mismatch exists")
def test_fd_model_prefix_equal_to_channel_length_mismatches():
    cfg = small_cfg()
    real = generate_channel(cfg.M, cfg.K, 64, PowerDelayProfile(8), 4)
    assert not validate_fd_model(cfg, real, l_cp=8, raise_on_mismatch=False).passed


def test_missing_or_short_table_rejected(table16):
    with pytest.raises(ConfigError, match="tables"):
        run_sweep(small_cfg())
    with pytest.raises(ConfigError, match="does not cover"):
        run_sweep(small_cfg(snr_db_grid=(25.0,)), table16)
    with pytest.raises(ConfigError, match="M="):
        run_sweep(small_cfg(M=17), table16)
    # ZF alone needs no table
    assert run_sweep(small_cfg(precoders=("zf",))).points


def test_sweep_record_count_and_finiteness(table16):
    res = run_sweep(small_cfg(), table16)
    assert len(res.points) == 2 * 2
    assert [p.precoder for p in res.points] == ["zf", "zf", "rzf", "rzf"]
    for pt in res.points:
        assert np.isfinite(pt.mean_gain_db) and np.isfinite(pt.stderr_db)
        assert len(pt.per_user_sinr_db) == 4 and pt.frames == 3
    assert res.complexity.zf_multiplies_per_bin == 16 + 64 + 64 + 256
    assert check_invariants(res) == []


def test_rzf_not_worse_than_zf_on_small_system(table16):
    res = run_sweep(small_cfg(snr_db_grid=(-10.0, 0.0), frames_per_point=6), table16)
    for snr in (-10.0, 0.0):
        assert res.point("rzf", snr).mean_gain_db > res.point("zf", snr).mean_gain_db


def test_shared_draws_across_precoders(table16):
    cfg = small_cfg(power_opt=False)
    entry = lookup(table16, 4, float(snr_to_sigma2(10.0)))
    a = simulate_frame(cfg, 1, 0, entry)
    b = simulate_frame(dataclasses.replace(cfg, precoders=("rzf",)), 1, 0, entry)
    assert a["rzf"].sinr.tobytes() == b["rzf"].sinr.tobytes()


def test_parallel_matches_serial(table16):
    cfg = small_cfg(snr_db_grid=(-10.0, 0.0, 10.0))
    serial = run_sweep(cfg, table16)
    parallel = run_sweep(cfg, table16, workers=2)
    assert serial.points == parallel.points


def test_progress_callback(table16):
    seen = []
    run_sweep(small_cfg(), table16, progress=lambda d, t: seen.append((d, t)))
    assert seen == [(1, 2), (2, 2)]


def test_check_invariants_flags_power_drift(table16):
    res = run_sweep(small_cfg(), table16)
    res.points[-1].tx_power_ratio = 1.2
    fails = check_invariants(res)
    assert len(fails) == 1 and "transmit power" in fails[0]


def test_emit_outputs_full(table16, tmp_path):
    res = run_sweep(small_cfg(), table16)
    paths = emit_outputs(res, tmp_path)
    assert set(paths) == {"results", "per_user", "complexity", "complexity_plot", "gain_plot"}
    lines = paths["results"].read_text().splitlines()
    assert lines[0] == f"# config_hash={res.config_hash} seed=5"
    rows = list(csv.DictReader(lines[1:]))
    assert tuple(rows[0]) == RESULT_COLUMNS
    assert len(rows) == 4
    per_user = paths["per_user"].read_text().splitlines()
    assert len(per_user) == 2 + 4 * 4
    svg = paths["gain_plot"].read_text()
    assert svg.lstrip().startswith("<?xml") and res.config_hash in svg


def test_emit_outputs_single_point(table16, tmp_path):
    res = run_sweep(small_cfg(snr_db_grid=(10.0,)), table16)
    paths = emit_outputs(res, tmp_path)
    rows = list(csv.DictReader(paths["results"].read_text().splitlines()[1:]))
    assert [r["precoder"] for r in rows] == ["zf", "rzf"]
    assert "gain_plot" in paths


def test_emit_outputs_empty_grid(tmp_path):
    res = run_sweep(small_cfg(snr_db_grid=()))
    paths = emit_outputs(res, tmp_path)
    assert "gain_plot" not in paths and not (tmp_path / "gain_vs_snr.svg").exists()
    lines = paths["results"].read_text().splitlines()
    assert len(lines) == 2 and lines[1].split(",") == list(RESULT_COLUMNS)


def test_outputs_are_byte_identical_across_runs(table16, tmp_path):
    cfg = small_cfg()
    a = emit_outputs(run_sweep(cfg, table16), tmp_path / "a")
    b = emit_outputs(run_sweep(cfg, table16), tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes(), key


def test_emit_outputs_surfaces_path(table16, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        emit_outputs(run_sweep(small_cfg(snr_db_grid=())), blocker / "sub")
