"""Command-line interface: full pipeline at tiny scale, flags, exit codes."""

import json
import os

import pytest

from xdmatch.cli import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    _channel_weights,
    _parse_config_file,
    dispatch,
)

SYNTH_FLAGS = [
    "--users", "40", "--items", "60", "--tags", "10",
    "--categories", "4", "--medias", "5", "--words", "30",
]
TRAIN_FLAGS = [
    "--epochs", "1", "--steps-per-epoch", "2", "--batch-size", "8",
    "--fanouts", "3,2", "--dim-in", "6", "--dim-out", "5",
    "--negatives", "3", "--learning-rate", "0.01",
]


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory, capfdmodule=None):
    """synth -> train -> index, shared across the CLI tests."""
    base = tmp_path_factory.mktemp("cli")
    data = str(base / "data")
    run = str(base / "run")
    idx = str(base / "idx")
    assert dispatch(["synth", "--out", data, "--seed", "0", *SYNTH_FLAGS]) == EXIT_OK
    assert dispatch(["train", "--data", data, "--out", run, *TRAIN_FLAGS]) == EXIT_OK
    assert (
        dispatch(
            ["index", "--data", data, "--checkpoint", os.path.join(run, "model.ckpt"),
             "--out", idx, "--fanouts", "3,2"]
        )
        == EXIT_OK
    )
    return data, run, idx


class TestPipeline:
    def test_synth_outputs(self, pipeline_dirs):
        data, _, _ = pipeline_dirs
        for name in ("nodes.tsv", "edges.tsv", "profiles.tsv",
                     "test_instances.jsonl", "meta.json", "run_manifest.json"):
            assert os.path.exists(os.path.join(data, name)), name

    def test_train_outputs(self, pipeline_dirs):
        _, run, _ = pipeline_dirs
        assert os.path.exists(os.path.join(run, "model.ckpt"))
        assert os.path.exists(os.path.join(run, "model.ckpt.manifest.json"))
        hist = open(os.path.join(run, "loss_history.jsonl")).read().splitlines()
        assert len(hist) == 2
        assert "total" in json.loads(hist[0])

    def test_manifest_contents(self, pipeline_dirs):
        _, run, _ = pipeline_dirs
        manifest = json.load(open(os.path.join(run, "run_manifest.json")))
        assert manifest["subcommand"] == "train"
        assert manifest["seed"] == 0
        assert "train" in manifest["timings_sec"]

    def test_index_output(self, pipeline_dirs):
        _, _, idx = pipeline_dirs
        lines = open(os.path.join(idx, "index.tsv")).read().splitlines()
        assert lines[0].startswith("# top_k")

    def test_eval_runs(self, pipeline_dirs, tmp_path, capfd):
        data, _, idx = pipeline_dirs
        out = str(tmp_path / "eval")
        code = dispatch(
            ["eval", "--data", data, "--index", os.path.join(idx, "index.tsv"),
             "--mode", "few_shot", "--out", out]
        )
        assert code == EXIT_OK
        report = json.load(open(os.path.join(out, "eval_report.json")))
        assert set(report["hit"]) == {"50", "100", "200", "500"}
        stdout = capfd.readouterr().out
        assert json.loads(stdout.strip().splitlines()[-1])["instances"] > 0

    def test_retrieve_runs(self, pipeline_dirs, tmp_path, capfd):
        data, _, idx = pipeline_dirs
        out_file = str(tmp_path / "matches.jsonl")
        code = dispatch(
            ["retrieve", "--index", os.path.join(idx, "index.tsv"),
             "--sequences", os.path.join(data, "test_instances.jsonl"),
             "--out", out_file, "--channel-weight", "tag=2.0"]
        )
        assert code == EXIT_OK
        first = json.loads(open(out_file).read().splitlines()[0])
        assert "items" in first and "candidates_touched" in first

    def test_build_graph_canonicalizes(self, pipeline_dirs, tmp_path, capfd):
        data, _, _ = pipeline_dirs
        out1, out2 = str(tmp_path / "g1"), str(tmp_path / "g2")
        assert dispatch(["build-graph", "--data", data, "--out", out1]) == EXIT_OK
        assert dispatch(["build-graph", "--data", out1, "--out", out2]) == EXIT_OK
        # canonical serialization is a fixed point under reload
        a = open(os.path.join(out1, "edges.tsv"), "rb").read()
        b = open(os.path.join(out2, "edges.tsv"), "rb").read()
        assert a == b


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capfd):
        with pytest.raises(SystemExit) as exc:
            dispatch(["frobnicate"])
        assert exc.value.code == EXIT_USAGE

    def test_missing_data_is_data_error(self, tmp_path, capfd):
        code = dispatch(
            ["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
        )
        assert code == EXIT_DATA

    def test_missing_config_file_is_usage_error(self, tmp_path, capfd):
        code = dispatch(
            ["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"),
             "--config", str(tmp_path / "missing.cfg")]
        )
        assert code == EXIT_USAGE

    def test_bad_channel_weight_is_usage_error(self, pipeline_dirs, tmp_path, capfd):
        data, _, idx = pipeline_dirs
        code = dispatch(
            ["retrieve", "--index", os.path.join(idx, "index.tsv"),
             "--sequences", os.path.join(data, "test_instances.jsonl"),
             "--channel-weight", "tag"]
        )
        assert code == EXIT_USAGE


class TestConfigParsing:
    def test_key_value_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\nlearning_rate = 0.05\nepochs = 2\n")
        cfg = _parse_config_file(str(p))
        assert cfg == {"learning_rate": "0.05", "epochs": "2"}

    def test_json_file(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text(json.dumps({"config": {"tau": 0.5}}))
        # values normalize to strings so both formats feed the same coercion
        assert _parse_config_file(str(p)) == {"tau": "0.5"}

    def test_malformed_line_rejected(self, tmp_path):
        from xdmatch.cli import CliError

        p = tmp_path / "bad.cfg"
        p.write_text("epochs 2\n")
        with pytest.raises(CliError, match="key = value"):
            _parse_config_file(str(p))

    def test_flags_override_config_file(self, tmp_path, capfd):
        # config asks for a bad learning rate; the flag must win
        data_cfg = tmp_path / "run.cfg"
        data_cfg.write_text("steps_per_epoch = 999\nlearning_rate = 0.5\n")
        from xdmatch.cli import _trainer_config, build_parser

        args = build_parser().parse_args(
            ["train", "--data", "x", "--out", "y",
             "--config", str(data_cfg), "--learning-rate", "0.25"]
        )
        cfg = _trainer_config(args)
        assert cfg.learning_rate == 0.25
        assert cfg.steps_per_epoch == 999

    def test_channel_weight_parsing(self):
        assert _channel_weights(["tag=2.0", "user=0"]) == {"tag": 2.0, "user": 0.0}
        assert _channel_weights(None) is None

    def test_version_flag(self, capfd):
        from xdmatch import __version__

        with pytest.raises(SystemExit) as exc:
            dispatch(["--version"])
        assert exc.value.code == 0
        assert __version__ in capfd.readouterr().out
