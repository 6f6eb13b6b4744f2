"""Command-line entry point: exit codes, outputs and determinism."""
from __future__ import annotations

import json

import pytest

from chronicle_kernels import cli
from chronicle_kernels.cli import ConfigError, RunConfig


def write_jsonl(path, lengths):
    path.write_text("".join(json.dumps({"id": f"s{i}", "length": n}) + "\n"
                            for i, n in enumerate(lengths)))
    return path


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig.from_sources()
        assert cfg.steps == 300 and cfg.optimizer == "adamw"

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"steps": 7, "optimizer": "muon"}')
        cfg = RunConfig.from_sources(p, {"steps": 9, "lr": None})
        assert cfg.steps == 9 and cfg.optimizer == "muon" and cfg.lr is None

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"stepz": 7}')
        with pytest.raises(ConfigError, match="unknown config keys"):
            RunConfig.from_sources(p)

    @pytest.mark.parametrize("bad", [{"optimizer": "sgd"}, {"steps": 0}, {"seq_len": 1},
                                     {"hidden": 30}])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            RunConfig.from_sources(overrides=bad)

    def test_loraplus_flag(self):
        cfg = RunConfig.from_sources(overrides={"use_loraplus": True})
        assert cfg.model_config().adapter == "lora+"
        cfg = RunConfig.from_sources(overrides={"use_loraplus": True, "adapter": "dora"})
        assert cfg.model_config().adapter == "dora"


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert cli.main(["frobnicate"]) == 2

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["train", "--config", str(tmp_path / "nope.json"),
                         "--out", str(tmp_path / "r")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_fault(self, capsys):
        assert cli.main(["verify", "--inject-fault", "nope"]) == 2

    def test_unknown_hardware(self, capsys):
        assert cli.main(["analyze", "--hardware", "TPU9"]) == 2

    def test_bad_capacity(self, tmp_path, capsys):
        assert cli.main(["pack", str(write_jsonl(tmp_path / "d.jsonl", [3])),
                         "--capacity", "0"]) == 2

    def test_unreadable_pack_input(self, tmp_path, capsys):
        assert cli.main(["pack", str(tmp_path / "missing.jsonl"), "--capacity", "5"]) == 2


class TestVerify:
    def test_suite_passes(self, tmp_path, capsys):
        out = tmp_path / "v.json"
        assert cli.main(["verify", "--suite", "numerics", "--report", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["pass"] and rep["suites"]["numerics"]["failed"] == 0

    def test_fault_injection_fails_and_names_the_check(self, capsys):
        code = cli.main(["verify", "--suite", "layers", "--inject-fault", "swiglu_bwd_sign"])
        assert code == 1
        assert "layers.swiglu_forward_backward" in capsys.readouterr().err

    def test_fault_is_undone(self, capsys):
        cli.main(["verify", "--suite", "layers", "--inject-fault", "swiglu_bwd_sign"])
        assert cli.main(["verify", "--suite", "layers"]) == 0


def test_pack(tmp_path, capsys):
    src = write_jsonl(tmp_path / "d.jsonl", [3, 3, 2, 2])
    out = tmp_path / "m.json"
    assert cli.main(["pack", str(src), "--capacity", "5", "--out", str(out)]) == 0
    man = json.loads(out.read_text())
    assert man["stats"]["n_bins"] == 2 and man["stats"]["packed_waste"] == 0.0
    assert "2 bins" in capsys.readouterr().out


def test_analyze(tmp_path, capsys):
    out = tmp_path / "a.json"
    assert cli.main(["analyze", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "ridge=156" in text and "MFU(41184)=39.6%" in text
    assert json.loads(out.read_text())["hardware"] == "A100"


def test_train_writes_deterministic_outputs(tmp_path, capsys):
    args = ["train", "--steps", "12", "--adapter", "lora", "--use_loraplus", "--seed", "4"]
    for name in ("a", "b"):
        assert cli.main(args + ["--out", str(tmp_path / name)]) == 0
    a, b = (tmp_path / "a", tmp_path / "b")
    assert (a / "metrics.jsonl").read_text() == (b / "metrics.jsonl").read_text()
    report = json.loads((a / "report.json").read_text())
    assert report["config"]["use_loraplus"] and report["verification"]["pass"]
    assert len((a / "metrics.jsonl").read_text().splitlines()) == 12


def test_train_gradient_check(tmp_path, capsys):
    assert cli.main(["train", "--steps", "2", "--adapter", "dora", "--verify_gradients",
                     "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["gradient_check"]["failed"] == []


def test_bench(tmp_path, capsys):
    out = tmp_path / "b.json"
    assert cli.main(["bench", "--rows", "8", "--hidden", "8", "--vocab", "4096",
                     "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["peak_bytes"]["chunked"] < rep["peak_bytes"]["naive"]
