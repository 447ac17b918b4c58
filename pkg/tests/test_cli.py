import json

import pytest

from meshgate.cli import main
from meshgate.config import preset_path


class TestValidateConfig:
    def test_shipped_presets_exit_zero(self, capsys):
        paths = [str(preset_path(n)) for n in ("clique7", "line7", "star7", "mesh7", "line3")]
        assert main(["validate-config", *paths]) == 0
        out = capsys.readouterr().out
        assert out.count(": ok") == 5

    def test_invalid_file_exit_two_with_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("name: x\nmotes: -3\nduration_s: 5\ntopology: {preset: line}\n")
        assert main(["validate-config", str(bad)]) == 2
        err = capsys.readouterr().err
        assert "bad.yaml:2" in err

    def test_missing_file_exit_two(self, capsys):
        assert main(["validate-config", "/nonexistent.yaml"]) == 2


class TestSim:
    def test_sim_twice_same_seed_byte_identical_traces(self, tmp_path):
        for sub in ("a", "b"):
            code = main([
                "sim", "--scenario", "line3", "--seed", "1",
                "--out", str(tmp_path / sub),
            ])
            assert code == 0
        trace_a = (tmp_path / "a" / "trace.jsonl").read_bytes()
        trace_b = (tmp_path / "b" / "trace.jsonl").read_bytes()
        assert trace_a == trace_b
        assert len(trace_a) > 1000

    def test_sim_different_seed_different_trace(self, tmp_path):
        main(["sim", "--scenario", "line3", "--seed", "1", "--out", str(tmp_path / "a")])
        main(["sim", "--scenario", "line3", "--seed", "2", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "trace.jsonl").read_bytes() != (
            tmp_path / "b" / "trace.jsonl"
        ).read_bytes()

    def test_sim_writes_summary(self, tmp_path):
        main(["sim", "--scenario", "line3", "--out", str(tmp_path / "o")])
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["scenario"] == "line3"
        assert summary["readings_received"] > 0

    def test_scenario_from_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MESHGATE_CONFIG", "line3")
        assert main(["sim", "--out", str(tmp_path / "env")]) == 0


class TestUsageErrors:
    def test_unknown_flag_exits_two_with_usage(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["sim", "--bogus"])
        assert err.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand_exits_two(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

    def test_missing_scenario_is_config_error(self, monkeypatch, capsys):
        monkeypatch.delenv("MESHGATE_CONFIG", raising=False)
        code = main(["sim", "--out", "unused"])
        assert code in (1, 2)


class TestExperimentsCli:
    def test_xlat_subcommand(self, tmp_path, capsys):
        assert main(["experiments", "xlat", "--packets", "40",
                     "--out", str(tmp_path / "x")]) == 0
        summary = json.loads((tmp_path / "x" / "summary.json").read_text())
        assert summary["count"] == 40

    def test_traffic_subcommand_small(self, tmp_path):
        assert main([
            "experiments", "traffic", "--counts", "1,2", "--duration", "10",
            "--seed", "3", "--out", str(tmp_path / "t"),
        ]) == 0
        summary = json.loads((tmp_path / "t" / "summary.json").read_text())
        assert [lv["mote_count"] for lv in summary["levels"]] == [1, 2]

    def test_counts_range_syntax(self, tmp_path):
        from meshgate.cli import _parse_counts

        assert _parse_counts("1..7") == [1, 2, 3, 4, 5, 6, 7]
        assert _parse_counts("2,4,6") == [2, 4, 6]


class TestPlots:
    def test_plots_from_experiment_output(self, tmp_path):
        main(["experiments", "xlat", "--packets", "30", "--out", str(tmp_path / "x")])
        main([
            "experiments", "traffic", "--counts", "1,2", "--duration", "5",
            "--seed", "1", "--out", str(tmp_path / "t"),
        ])
        code = main([
            "plots", "--traffic", str(tmp_path / "t"), "--xlat", str(tmp_path / "x"),
            "--out", str(tmp_path / "p"),
        ])
        assert code == 0
        assert (tmp_path / "p" / "delay_jitter.png").stat().st_size > 0
        assert (tmp_path / "p" / "delay_histogram.png").stat().st_size > 0
