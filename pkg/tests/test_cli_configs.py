"""Tests for the command-line interface and YAML config loading."""

import json

import pytest
import yaml

from raceloop.cli import main
from raceloop.clock import UniformLatency
from raceloop.configs import (
    load_experiment_config,
    load_run_config,
    load_vehicle_params,
    save_vehicle_params,
)
from raceloop.dynamics import default_vehicle_params
from raceloop.track import load_waypoints_csv


class TestVehicleParamsIo:
    def test_roundtrip(self, tmp_path):
        params = default_vehicle_params()
        path = tmp_path / "vehicle.yaml"
        save_vehicle_params(params, path)
        back = load_vehicle_params(path)
        assert back == params

    def test_missing_key_reported(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("m: 3.0\nlf: 0.1\n")
        with pytest.raises(ValueError, match="missing key"):
            load_vehicle_params(path)


class TestRunAndExperimentConfigs:
    def test_experiment_config_full(self, tmp_path):
        params_path = tmp_path / "vehicle.yaml"
        save_vehicle_params(default_vehicle_params(), params_path)
        track_path = tmp_path / "track.csv"
        assert main(
            [
                "track",
                "gen-oval",
                "--length",
                "10",
                "--width",
                "6",
                "--half-width",
                "0.8",
                "--n-points",
                "64",
                "--out",
                str(track_path),
            ]
        ) == 0
        cfg_path = tmp_path / "exp.yaml"
        cfg_path.write_text(
            yaml.safe_dump(
                {
                    "mode": "sim",
                    "workers": [1, 2],
                    "min_gap_ms": 10,
                    "duration_s": 2,
                    "seed": 5,
                    "latency": "uniform:15,25",
                    "controller": "hold",
                    "track": "track.csv",
                    "params": "vehicle.yaml",
                    "out": str(tmp_path / "results"),
                }
            )
        )
        cfg = load_experiment_config(cfg_path)
        assert cfg.worker_counts == [1, 2]
        assert cfg.latency == UniformLatency(15.0, 25.0)
        assert cfg.params == default_vehicle_params()
        assert cfg.track is not None

    def test_run_config_minimal(self, tmp_path):
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text("mode: sim\nworkers: 2\nduration_s: 3\n")
        cfg = load_run_config(cfg_path)
        assert cfg.workers == 2
        assert cfg.duration_s == 3

    def test_unknown_mpcc_key_rejected(self, tmp_path):
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text("mpcc: {horizon: 10}\n")
        with pytest.raises(ValueError, match="unknown mpcc"):
            load_run_config(cfg_path)


class TestCli:
    def test_gen_oval_writes_loadable_csv(self, tmp_path):
        out = tmp_path / "track.csv"
        code = main(["track", "gen-oval", "--n-points", "64", "--out", str(out)])
        assert code == 0
        pts = load_waypoints_csv(out)
        assert len(pts) == 64

    def test_sim_rollout(self, tmp_path):
        out = tmp_path / "traj.csv"
        code = main(
            [
                "sim",
                "rollout",
                "--d",
                "0.3",
                "--steps",
                "100",
                "--x0",
                "0,0,0,1,0,0",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "t_ns,x_m,y_m,phi_rad,vx_mps,vy_mps,omega_radps"
        assert len(lines) == 102  # header + 101 states

    def test_bench_run_and_stats(self, tmp_path, capsys):
        out = tmp_path / "results"
        code = main(
            [
                "bench",
                "run",
                "--workers",
                "1,2",
                "--duration-s",
                "2",
                "--mode",
                "sim",
                "--seed",
                "3",
                "--latency",
                "const:25",
                "--controller",
                "hold",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        captured = capsys.readouterr()
        assert "workers=1" in captured.out
        assert (out / "summary.json").exists()

        code = main(["bench", "stats", str(out / "w1_rep0.csv")])
        assert code == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["mean_ms"] == pytest.approx(25.0, abs=1.0)

    def test_bench_run_refuses_existing_output(self, tmp_path, capsys):
        out = tmp_path / "results"
        args = [
            "bench", "run", "--workers", "1", "--duration-s", "1",
            "--latency", "const:25", "--out", str(out),
        ]
        assert main(args) == 0
        assert main(args) == 1
        assert "force" in capsys.readouterr().err
        assert main(args + ["--force"]) == 0

    def test_error_exit_code_and_message(self, tmp_path, capsys):
        code = main(["bench", "stats", str(tmp_path / "missing.csv")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_latency_spec_fails(self, tmp_path, capsys):
        code = main(
            ["bench", "run", "--latency", "weird:1", "--out", str(tmp_path / "o")]
        )
        assert code == 1
