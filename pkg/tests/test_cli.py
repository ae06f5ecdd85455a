"""CLI subcommand behavior, run in-process through cli.main."""

import json

import numpy as np
import pytest

from btunet.checkpoint import Checkpoint
from btunet.cli import main
from btunet.errors import CheckpointError
from btunet.models import ModelArchConfig, build_encoder


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli-ws")
    assert main(["synth", "--count", "30", "--size", "16", "--out",
                 str(ws / "data"), "--seed", "3"]) == 0
    config = {
        "dataset": {"root": str(ws / "data"), "image_size": 16},
        "variants": ["unet"],
        "bt": [False],
        "fractions": [0.5],
        "folds_k": 2,
        "seeds": [2],
        "pretrain": {"epochs": 1, "batch_size": 4},
        "finetune": {"max_epochs": 1, "batch_size": 2},
    }
    (ws / "exp.json").write_text(json.dumps(config))
    return ws


class TestSynth:
    def test_writes_images_masks_and_manifest(self, workspace):
        data = workspace / "data"
        assert len(list((data / "images").glob("*.png"))) == 30
        assert len(list((data / "masks").glob("*.png"))) == 30
        manifest = json.loads((data / "manifest.json").read_text())
        assert len(manifest["records"]) == 30

    def test_blob_family_flag(self, tmp_path):
        assert main(["synth", "--count", "3", "--size", "16", "--out",
                     str(tmp_path / "blobs"), "--seed", "1",
                     "--shapes", "blobs", "--noise", "0"]) == 0
        assert len(list((tmp_path / "blobs" / "images").glob("*.png"))) == 3


class TestExperimentAndReport:
    def test_experiment_writes_reports(self, workspace, capsys):
        out = workspace / "run"
        assert main(["experiment", "--config", str(workspace / "exp.json"),
                     "--out", str(out), "--quiet"]) == 0
        assert (out / "report.csv").exists()
        assert (out / "report.json").exists()
        report = json.loads((out / "report.json").read_text())
        assert len([r for r in report["rows"] if r["status"] == "ok"]) == 2

    def test_report_csv_to_stdout(self, workspace, capsys):
        assert main(["report", "--in", str(workspace / "run"),
                     "--format", "csv"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("variant,bt,fraction,fold,seed,")

    def test_report_json_to_stdout(self, workspace, capsys):
        assert main(["report", "--in", str(workspace / "run"),
                     "--format", "json"]) == 0
        parsed = json.loads(capsys.readouterr().out)
        assert "aggregates" in parsed


class TestPretrainFinetuneEval:
    def test_pretrain_writes_encoder_checkpoint(self, workspace, capsys):
        out = workspace / "enc.ckpt"
        assert main(["pretrain", "--config", str(workspace / "exp.json"),
                     "--out", str(out)]) == 0
        ckpt = Checkpoint.load(out)
        assert ckpt.phase == "PRETRAIN"
        assert all(k.startswith("encoder/") for k in ckpt.tensors)

    def test_finetune_with_transfer_and_eval(self, workspace, capsys):
        model_out = workspace / "model.ckpt"
        assert main(["finetune", "--config", str(workspace / "exp.json"),
                     "--encoder-ckpt", str(workspace / "enc.ckpt"),
                     "--out", str(model_out)]) == 0
        ckpt = Checkpoint.load(model_out)
        assert ckpt.phase == "FINETUNE"
        assert main(["eval", "--ckpt", str(model_out),
                     "--data", str(workspace / "data")]) == 0
        metrics = json.loads(capsys.readouterr().out.split("}\n")[-2] + "}")
        assert set(metrics) >= {"precision", "dc", "miou"}

    def test_eval_rejects_pretrain_checkpoint(self, workspace, tmp_path):
        enc = build_encoder(ModelArchConfig(variant="unet", input_size=16,
                                            input_channels=1, base_channels=16))
        ckpt = Checkpoint.from_module(enc, enc.arch.to_dict(), "PRETRAIN", 0)
        path = tmp_path / "enc.ckpt"
        ckpt.save(path)
        with pytest.raises(CheckpointError, match="FINETUNE"):
            main(["eval", "--ckpt", str(path), "--data", str(workspace / "data")])
