"""Command-line surface: config parsing, exit codes, and artifact layout."""

import json
import shutil
import subprocess

import numpy as np
import pytest

from cfrpn import cli
from cfrpn.checkpoint import load_checkpoint
from cfrpn.cli import (
    DEFAULTS,
    METRICS_HEADER,
    UsageError,
    config_hash,
    load_config,
    main,
    parse_pairs,
    parse_seeds,
)

# A run small enough to train in seconds but exercising every artifact.
TINY = [
    "--override", "data.train_samples=48",
    "--override", "data.val_samples=24",
    "--override", "arch.widths=4,4,4,4",
    "--override", "train.batch_size=24",
    "--override", "train.epochs=2",
    "--override", "train.lr=2e-3",
]


class TestLoadConfig:
    def test_defaults_when_no_file(self):
        assert load_config(None) == DEFAULTS

    def test_file_with_comments_and_blanks(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "# full-line comment\n"
            "\n"
            "train.lr = 0.01   # trailing comment\n"
            "arch.mode=cfrpn\n"
            "data.augment = on\n"
        )
        cfg = load_config(str(cfg_file))
        assert cfg["train.lr"] == 0.01
        assert cfg["arch.mode"] == "cfrpn"
        assert cfg["data.augment"] is True

    def test_unknown_key_in_file_rejected_with_line_number(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("train.lr = 0.01\nno.such.key = 3\n")
        with pytest.raises(UsageError, match=r":2.*no\.such\.key"):
            load_config(str(cfg_file))

    def test_line_without_equals_rejected(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("just some words\n")
        with pytest.raises(UsageError, match="key = value"):
            load_config(str(cfg_file))

    def test_missing_file_rejected(self):
        with pytest.raises(UsageError, match="not found"):
            load_config("/no/such/file.cfg")

    def test_override_wins_over_file(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("train.epochs = 7\n")
        cfg = load_config(str(cfg_file), ["train.epochs=3"])
        assert cfg["train.epochs"] == 3

    def test_override_type_coercion(self):
        cfg = load_config(None, [
            "train.epochs=5", "train.lr=1e-3", "arch.per_batch=true",
            "data.augment=0", "compare.pairs=42:30",
        ])
        assert cfg["train.epochs"] == 5 and isinstance(cfg["train.epochs"], int)
        assert cfg["train.lr"] == 1e-3
        assert cfg["arch.per_batch"] is True
        assert cfg["data.augment"] is False
        assert cfg["compare.pairs"] == "42:30"

    def test_bad_int_rejected(self):
        with pytest.raises(UsageError, match="expects int"):
            load_config(None, ["train.epochs=three"])

    def test_bad_bool_rejected(self):
        with pytest.raises(UsageError, match="expects bool"):
            load_config(None, ["data.augment=maybe"])

    def test_unknown_override_key_rejected(self):
        with pytest.raises(UsageError, match="unknown config key"):
            load_config(None, ["train.momentum=0.9"])

    def test_override_without_equals_rejected(self):
        with pytest.raises(UsageError, match="key=value"):
            load_config(None, ["train.lr"])


class TestParsers:
    def test_seeds_parsed(self):
        assert parse_seeds("0,1,2") == [0, 1, 2]
        assert parse_seeds("5") == [5]

    def test_seeds_reject_garbage(self):
        with pytest.raises(UsageError):
            parse_seeds("1,two")
        with pytest.raises(UsageError):
            parse_seeds(",")

    def test_pairs_parsed(self):
        assert parse_pairs("21:15, 42:30") == [(21, 15), (42, 30)]

    def test_pairs_reject_malformed(self):
        for text in ("21", "a:b", "1:2:3", ""):
            with pytest.raises(UsageError):
                parse_pairs(text)

    def test_config_hash_tracks_values(self):
        a = load_config(None)
        b = load_config(None, ["train.lr=0.5"])
        assert config_hash(a) == config_hash(dict(reversed(list(a.items()))))
        assert config_hash(a) != config_hash(b)


class TestExitCodes:
    def test_unknown_override_is_usage_error(self, capsys):
        assert main(["train", "--override", "bogus.key=1"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_missing_config_file(self, capsys):
        assert main(["train", "--config", "/no/such.cfg"]) == 1

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_cifar_source_requires_directory(self, capsys):
        assert main(["train", "--override", "data.source=cifar10"]) == 1
        assert "data.dir" in capsys.readouterr().err

    def test_raw_source_requires_paths(self, capsys):
        assert main(["train", "--override", "data.source=raw"]) == 1

    def test_unknown_data_source(self, capsys):
        assert main(["train", "--override", "data.source=imagenet"]) == 1

    def test_missing_cifar_files_reported(self, tmp_path, capsys):
        rc = main(["train", "--override", "data.source=cifar10",
                   "--data-dir", str(tmp_path)])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_trace_missing_checkpoint(self, tmp_path, capsys):
        rc = main(["trace", "--checkpoint", str(tmp_path / "none.ckpt"),
                   "--out", str(tmp_path)] + TINY)
        assert rc == 1

    def test_divergence_exits_2(self, tmp_path, capsys):
        argv = (["train", "--out", str(tmp_path), "--seeds", "0"] + TINY
                + ["--override", "train.lr=1e30", "--override", "train.epochs=1"])
        with np.errstate(all="ignore"):
            assert main(argv) == 2
        assert "numeric failure" in capsys.readouterr().err

    def test_gradcheck_failure_exits_3(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "run_all", lambda seed: [("fake_case", 1.0)])
        assert main(["gradcheck"]) == 3
        out = capsys.readouterr()
        assert "FAIL" in out.out and "FAILED" in out.err


class TestGradcheckCommand:
    def test_all_pass(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "all gradient checks passed" in out
        assert "FAIL\n" not in out


class TestParamsCommand:
    def test_reference_pairs_within_one(self, capsys):
        assert main(["params"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("baseline_n,")
        rows = [line.split(",") for line in lines[1:]]
        assert [int(r[0]) for r in rows] == [135, 120, 104, 85, 42, 21]
        for _, base, matched_m, matched, reference_m, rel in rows:
            assert abs(int(matched_m) - int(reference_m)) <= 1
            assert abs(int(matched) - int(base)) / int(base) < 0.05


class TestTrainCommand:
    def test_artifacts_and_determinism(self, tmp_path, capsys):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            assert main(["train", "--out", str(out), "--seeds", "0"] + TINY) == 0
        run = out_a / "seed0"
        metrics = (run / "metrics.csv").read_text().splitlines()
        assert metrics[0] == METRICS_HEADER
        assert len(metrics) == 3  # header + one row per epoch
        assert all(line.startswith("0,") for line in metrics[1:])
        timing = (run / "timing.csv").read_text().splitlines()
        assert timing[0] == "seed,epoch,wall_s"
        assert len(timing) == 3
        params, adam = load_checkpoint(run / "model.ckpt")
        assert adam is not None and len(params) > 0
        # identical config and seed: byte-identical metrics, separate timing
        assert (run / "metrics.csv").read_bytes() == \
               (out_b / "seed0" / "metrics.csv").read_bytes()

    def test_manifest_reproduces_config_identity(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--out", str(out), "--seeds", "0"] + TINY) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["seeds"] == [0]
        assert manifest["config_hash"] == config_hash(manifest["config"])


class TestCompareCommand:
    def test_summary_curves_and_gap_line(self, tmp_path, capsys):
        argv = (["compare", "--out", str(tmp_path), "--seeds", "0"] + TINY
                + ["--override", "compare.pairs=4:3",
                   "--override", "train.epochs=1"])
        assert main(argv) == 0
        out = capsys.readouterr().out
        assert "pair 4:3: baseline" in out and "gap" in out
        summary = (tmp_path / "summary.csv").read_text().splitlines()
        assert summary[0].startswith("pair,model,width,params,")
        assert len(summary) == 3  # one row per model
        assert summary[1].startswith("4:3,baseline,4,")
        assert summary[2].startswith("4:3,cfrpn,3,")
        curves = (tmp_path / "curves.csv").read_text().splitlines()
        assert curves[0] == "pair,model,width,seed,epoch,val_acc"
        assert len(curves) == 3  # one epoch per model
        for mode, width in (("baseline", 4), ("cfrpn", 3)):
            run = tmp_path / "pair_4x3" / f"{mode}_w{width}" / "seed0"
            assert (run / "metrics.csv").is_file()
            assert (run / "model.ckpt").is_file()
        assert json.loads((tmp_path / "manifest.json").read_text())["command"] == "compare"


class TestTraceCommand:
    def test_trace_schema_and_bounds(self, tmp_path, capsys):
        train_out = tmp_path / "train"
        arch = ["--override", "arch.mode=cfrpn"]
        assert main(["train", "--out", str(train_out), "--seeds", "0"]
                    + TINY + arch + ["--override", "train.epochs=1"]) == 0
        trace_out = tmp_path / "trace"
        rc = main(["trace", "--checkpoint", str(train_out / "seed0" / "model.ckpt"),
                   "--out", str(trace_out), "--seeds", "0"] + TINY + arch)
        assert rc == 0
        lines = (trace_out / "trace.csv").read_text().splitlines()
        assert lines[0] == "seed,stage,sample,t_star,stop_reason,final_distance"
        rows = [line.split(",") for line in lines[1:]]
        assert len(rows) == 3 * 24  # stages 2..4, one row per sample
        assert {r[1] for r in rows} == {"2", "3", "4"}
        for _, _, _, t_star, reason, distance in rows:
            assert 1 <= int(t_star) <= 8
            assert reason in ("converged", "max_reached")
            if reason == "converged":
                assert float(distance) < 0.1
        out = capsys.readouterr().out
        assert "accuracy" in out and "stage 2:" in out


def test_console_script_installed():
    exe = shutil.which("cfrpn")
    assert exe, "cfrpn entry point missing; install with pip install -e ."
    proc = subprocess.run([exe, "params"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[1].startswith("135,")
