from __future__ import annotations

import struct
from pathlib import Path

import pytest
from aircomp_fl.cli import build_parser, main
from aircomp_fl.reports import read_csv, read_summary


def test_parser_requires_a_command() -> None:
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args([])
    assert excinfo.value.code == 2


def test_usage_error_exits_2() -> None:
    with pytest.raises(SystemExit) as excinfo:
        main(["run", "--policy", "greedy"])
    assert excinfo.value.code == 2


def test_oracle_check(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["-q", "oracle-check", "--instances", "50", "--max-workers", "8"]) == 0
    assert "50" in capsys.readouterr().out


def test_run_all_policies_then_bounds(tmp_path: Path) -> None:
    out = tmp_path / "runs"
    argv = ["-q", "run", "--policy", "all", "--iterations", "20", "--no-plots"]
    assert main([*argv, "--out-dir", str(out)]) == 0
    for policy in ("inflota", "random", "perfect"):
        run_dir = out / f"{policy}-seed0"
        for name in ("metrics.csv", "bounds.csv", "summary.json", "decisions.parquet"):
            assert (run_dir / name).exists()
        assert read_summary(run_dir / "summary.json")["iterations"] == 20
    assert not list(out.glob("*.svg"))

    run_dir = out / "inflota-seed0"
    # bounds creates a fresh output directory
    recomputed = tmp_path / "recomputed" / "constants"
    assert main(["-q", "bounds", str(run_dir), "--out-dir", str(recomputed)]) == 0
    before = read_csv(run_dir / "bounds.csv")
    after = read_csv(recomputed / "bounds.csv")
    assert after["A_t"].to_pylist() == pytest.approx(before["A_t"].to_pylist())

    # a larger rho1 only raises B_t
    assert main(["-q", "bounds", str(run_dir), "--rho1", "5.0", "--out-dir", str(recomputed)]) == 0
    raised = read_csv(recomputed / "bounds.csv")
    assert all(
        x >= y for x, y in zip(raised["B_t"].to_pylist(), before["B_t"].to_pylist())
    )


def test_run_with_config_file(tmp_path: Path) -> None:
    config = tmp_path / "scenario.toml"
    config.write_text(
        "[scenario]\nnum_workers = 5\nnum_iterations = 3\npolicy = \"random\"\n"
        "[channel]\nnoise_variance = 1e-3\n",
        encoding="utf-8",
    )
    out = tmp_path / "runs"
    assert main(["-q", "run", "--config", str(config), "--seed", "4", "--out-dir", str(out)]) == 0
    summary = read_summary(out / "random-seed4" / "summary.json")
    assert len(summary["sample_counts"]) == 5
    assert summary["config"]["channel"]["noise_variance"] == 1e-3
    assert (out / "loss.svg").exists()


def test_sweep(tmp_path: Path) -> None:
    argv = [
        "-q",
        "sweep",
        "--axis",
        "noise_variance",
        "--values",
        "1e-4,1e-2",
        "--seeds",
        "1",
        "--iterations",
        "5",
        "--policy",
        "perfect",
        "--policy",
        "inflota",
        "--out-dir",
        str(tmp_path),
    ]
    assert main(argv) == 0
    table = read_csv(tmp_path / "sweep_noise_variance.csv")
    assert table.num_rows == 4
    assert (tmp_path / "sweep_noise_variance_summary.csv").exists()
    assert (tmp_path / "sweep_noise_variance.svg").exists()


def test_bad_sweep_values(tmp_path: Path) -> None:
    argv = ["-q", "sweep", "--axis", "num_workers", "--values", "ten", "--out-dir", str(tmp_path)]
    assert main(argv) == 3


def test_missing_config_exits_3(tmp_path: Path) -> None:
    assert main(["-q", "run", "--config", str(tmp_path / "nope.toml")]) == 3


def test_invalid_override_exits_3(tmp_path: Path) -> None:
    assert main(["-q", "run", "--workers", "0", "--out-dir", str(tmp_path)]) == 3


def test_unpaired_mnist_files_exit_3(tmp_path: Path) -> None:
    images = tmp_path / "images"
    images.write_bytes(b"")
    argv = ["-q", "run", "--task", "mlp_classifier", "--mnist-images", str(images)]
    assert main([*argv, "--out-dir", str(tmp_path)]) == 3


def test_bad_mnist_magic_exits_4(tmp_path: Path) -> None:
    bad = tmp_path / "bad-idx"
    bad.write_bytes(bytes([0, 0, 7, 3]) + struct.pack(">3I", 1, 1, 1) + b"\x00")
    argv = [
        "-q",
        "run",
        "--task",
        "mlp_classifier",
        "--mnist-images",
        str(bad),
        "--mnist-labels",
        str(bad),
        "--out-dir",
        str(tmp_path),
    ]
    assert main(argv) == 4


def test_bounds_on_missing_run_exits_6(tmp_path: Path) -> None:
    assert main(["-q", "bounds", str(tmp_path / "no-such-run")]) == 6


def test_run_with_paper_profile(tmp_path: Path) -> None:
    argv = ["-q", "run", "--profile", "paper", "--iterations", "3", "--no-plots"]
    assert main([*argv, "--out-dir", str(tmp_path)]) == 0
    summary = read_summary(tmp_path / "inflota-seed0" / "summary.json")
    assert summary["config"]["scenario"]["profile"] == "paper"
    assert summary["iterations"] == 3
