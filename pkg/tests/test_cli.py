import subprocess
import sys

import numpy as np
import pytest

from hybridprec.cli import (
    ConfigError,
    ExperimentConfig,
    emit_plot_script,
    main,
    parse_config,
    run_experiment,
    validate_config,
)


def write_config(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


BER_CFG = """
nt = 16
nr = 8
nt_rf = 4
nr_rf = 4
ns = 2
snr_grid_db = -5, 5
trials = 200
seed = 3
schemes = fully_digital_gmd, phase_projection
max_iters = 100
learning_rate = 0.02
tolerance = 0.0
"""


class TestParseConfig:
    def test_values_parsed(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, "learning_rate = 0.001\n"), kind="ber")
        assert cfg.learning_rate == 0.001

    def test_batch_size_default(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, "seed = 1\n"), kind="ber")
        assert cfg.batch_size == 20

    def test_documented_defaults(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, ""), kind="ber")
        assert cfg.tolerance == 1e-7
        assert cfg.learning_rate == 0.001
        assert cfg.momentum == 0.9
        assert cfg.p_nlos == 3

    def test_dimension_violation_names_rule(self, tmp_path):
        with pytest.raises(ConfigError, match="ns <= nt_rf <= nt"):
            parse_config(write_config(tmp_path, "ns = 4\nnt_rf = 2\n"), kind="ber")

    def test_unknown_key_with_line_number(self, tmp_path):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config(write_config(tmp_path, "seed = 1\nbogus = 2\n"), kind="ber")

    def test_malformed_line_with_line_number(self, tmp_path):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config(write_config(tmp_path, "just some words\n"), kind="ber")

    def test_duplicate_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(write_config(tmp_path, "seed = 1\nseed = 2\n"), kind="ber")

    def test_kind_mismatch(self, tmp_path):
        with pytest.raises(ConfigError, match="does not match"):
            parse_config(write_config(tmp_path, "kind = se\n"), kind="ber")

    def test_comments_and_blanks_ignored(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, "# comment\n\nseed = 9\n"), kind="ber")
        assert cfg.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "nope.cfg", kind="ber")

    def test_mse_scheme_validation(self, tmp_path):
        with pytest.raises(ConfigError, match="mse schemes"):
            parse_config(
                write_config(tmp_path, "schemes = fully_digital_gmd\n"), kind="mse"
            )


class TestRunExperiment:
    def test_ber_row_count_and_columns(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, BER_CFG), kind="ber")
        outputs = run_experiment(cfg, tmp_path / "out")
        csv = (tmp_path / "out" / "ber.csv").read_text().splitlines()
        assert csv[0] == "snr_db,scheme,ber,ci_halfwidth,trials"
        assert len(csv) == 1 + 2 * 2  # header + schemes x grid points

    def test_byte_identical_reruns(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, BER_CFG), kind="ber")
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "ber.csv").read_bytes() == (tmp_path / "b" / "ber.csv").read_bytes()

    def test_seed_changes_output(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, BER_CFG), kind="ber")
        from dataclasses import replace

        run_experiment(cfg, tmp_path / "a")
        run_experiment(replace(cfg, seed=4), tmp_path / "b")
        assert (tmp_path / "a" / "ber.csv").read_bytes() != (tmp_path / "b" / "ber.csv").read_bytes()

    def test_manifest_written(self, tmp_path):
        import json

        cfg = parse_config(write_config(tmp_path, BER_CFG), kind="ber")
        run_experiment(cfg, tmp_path / "out")
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 3
        assert "compute" in manifest["stages_seconds"]
        assert "ber.csv" in manifest["outputs"]

    def test_gmd_check_summary(self, tmp_path, capsys):
        cfg = parse_config(
            write_config(tmp_path, "nt = 12\nnr = 6\nns = 3\ntrials = 100\nseed = 0\n"),
            kind="gmd-check",
        )
        run_experiment(cfg, tmp_path / "out")
        captured = capsys.readouterr().out
        assert "max_diag_dev=" in captured
        max_diag = float(captured.split("max_diag_dev=")[1].split()[0])
        assert max_diag < 1e-8

    def test_se_columns(self, tmp_path):
        text = BER_CFG.replace("trials = 200", "trials = 30")
        cfg = parse_config(write_config(tmp_path, text), kind="se")
        run_experiment(cfg, tmp_path / "out")
        csv = (tmp_path / "out" / "se.csv").read_text().splitlines()
        assert csv[0] == "snr_db,scheme,bits_per_s_hz"

    def test_mse_columns(self, tmp_path):
        text = "nt = 16\nnr = 8\nnt_rf = 4\nnr_rf = 4\nns = 2\ntrials = 4\nseed = 1\nmax_iters = 40\ntolerance = 0.0\nlearning_rate = 0.01\n"
        cfg = parse_config(write_config(tmp_path, text), kind="mse")
        run_experiment(cfg, tmp_path / "out")
        csv = (tmp_path / "out" / "mse.csv").read_text().splitlines()
        assert csv[0] == "iteration,scheme,mse"
        schemes = {line.split(",")[1] for line in csv[1:]}
        assert schemes == {"sgd_hybrid", "analog_only"}

    def test_complexity_bench_quadratic_margin(self, tmp_path, capsys):
        text = "nt_sweep = 16, 32, 64\nnt_rf = 4\nns = 2\nnr = 8\nbench_repeats = 5\nbench_iters = 50\nseed = 1\n"
        cfg = parse_config(write_config(tmp_path, text), kind="complexity-bench")
        run_experiment(cfg, tmp_path / "out")
        rows = (tmp_path / "out" / "complexity.csv").read_text().splitlines()[1:]
        medians = [float(r.split(",")[1]) for r in rows]
        assert medians[-1] / medians[0] <= 25.0

    def test_train_writes_model_and_history(self, tmp_path):
        text = (
            "nt = 8\nnr = 4\nnt_rf = 4\nnr_rf = 4\nns = 2\ntrain_size = 6\n"
            "max_iters = 10\nbatch_size = 2\nseed = 2\ntolerance = 0.0\n"
        )
        cfg = parse_config(write_config(tmp_path, text), kind="train")
        outputs = run_experiment(cfg, tmp_path / "out")
        names = {p.name for p in outputs}
        assert {"model.npz", "train_history.csv", "manifest.json"} <= names
        from hybridprec.dnn import load_mlp

        net = load_mlp(str(tmp_path / "out" / "model.npz"))
        assert net.codec.nt == 8


class TestPlotScript:
    def test_ber_script_logscale_and_columns(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, BER_CFG), kind="ber")
        run_experiment(cfg, tmp_path / "out")
        script = (tmp_path / "out" / "ber.gp").read_text()
        assert "set logscale y" in script
        header = (tmp_path / "out" / "ber.csv").read_text().splitlines()[0].split(",")
        # referenced column indices must exist in the header
        assert f"${header.index('snr_db') + 1}" in script
        assert f":{header.index('ber') + 1} " in script
        assert "fully_digital_gmd" in script

    def test_se_script_linear_axes(self, tmp_path):
        text = BER_CFG.replace("trials = 200", "trials = 20")
        cfg = parse_config(write_config(tmp_path, text), kind="se")
        run_experiment(cfg, tmp_path / "out")
        script = (tmp_path / "out" / "se.gp").read_text()
        assert "unset logscale" in script
        assert "set logscale" not in script.replace("unset logscale", "")

    def test_missing_csv_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            emit_plot_script(tmp_path / "ber.csv")


class TestMainEntry:
    def test_cli_round_trip(self, tmp_path):
        cfg_path = write_config(tmp_path, BER_CFG)
        rc = main(["ber", "--config", str(cfg_path), "--out", str(tmp_path / "out")])
        assert rc == 0
        assert (tmp_path / "out" / "ber.csv").is_file()

    def test_seed_override(self, tmp_path):
        cfg_path = write_config(tmp_path, BER_CFG)
        main(["ber", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        main(["ber", "--config", str(cfg_path), "--out", str(tmp_path / "b"), "--seed", "99"])
        assert (tmp_path / "a" / "ber.csv").read_bytes() != (tmp_path / "b" / "ber.csv").read_bytes()

    def test_validation_error_exit_code(self, tmp_path):
        cfg_path = write_config(tmp_path, "ns = 4\nnt_rf = 2\n")
        rc = main(["ber", "--config", str(cfg_path), "--out", str(tmp_path / "out")])
        assert rc == 1

    def test_console_subprocess(self, tmp_path):
        cfg_path = write_config(tmp_path, BER_CFG)
        proc = subprocess.run(
            [sys.executable, "-m", "hybridprec.cli", "ber", "--config", str(cfg_path),
             "--out", str(tmp_path / "out")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "out" / "manifest.json").is_file()
