import json
from pathlib import Path

import numpy as np
import pytest

from ocad import dataio
from ocad.cli import RunConfig, main


TINY = [
    "seed=1",
    "synth.duration=1.2",
    "synth.slices_per_subject=2",
    "model.input_size=16",
    "model.nz=4",
    "model.ngf=2",
    "model.epochs=1",
    "anogan.epochs=1",
    "anogan.invert_steps=5",
]


def run(args, out_dir, extra=()):
    sets = []
    for kv in TINY + [f"out_dir={out_dir}"] + list(extra):
        sets += ["--set", kv]
    return main(args + sets)


def pipeline(out_dir, extra=()):
    manifest = str(Path(out_dir) / "corpus" / "manifest.csv")
    assert run(["synth"], out_dir, extra) == 0
    assert run(["train", "--manifest", manifest, "--fold", "0"],
               out_dir, extra) == 0
    ckpt = str(Path(out_dir) / "ganomaly_fold0.ckpt")
    assert run(["eval", "--checkpoint", ckpt, "--manifest", manifest,
                "--fold", "0"], out_dir, extra) == 0
    return manifest, ckpt


# ---------------------------------------------------------------------------
# config handling

def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("seed = 5  # master seed\nmodel.nz = 8\n\n")
    cfg = RunConfig.load(path, ["model.nz=16"])
    assert cfg.get_int("seed") == 5
    assert cfg.get_int("model.nz") == 16        # flag wins over file


def test_unknown_config_key_rejected(tmp_path):
    with pytest.raises(ValueError, match="unknown config"):
        RunConfig.load(None, ["model.dropout=0.5"])
    path = tmp_path / "bad.conf"
    path.write_text("no equals sign here\n")
    with pytest.raises(ValueError, match="expected key"):
        RunConfig.load(path)


def test_bad_set_syntax_is_validation_error(tmp_path, capsys):
    assert main(["synth", "--set", "oops"]) == 1
    assert capsys.readouterr().err.startswith("error:validation:")


# ---------------------------------------------------------------------------
# synth

def test_synth_writes_corpus_and_manifest(tmp_path, capsys):
    assert run(["synth"], tmp_path) == 0
    out = capsys.readouterr().out
    assert "images: pd=26 control=26" in out
    manifest = dataio.read_manifest(tmp_path / "corpus" / "manifest.csv",
                                    validate=True)
    assert manifest.counts_per_class() == {"pd": 26, "control": 26}
    assert len(manifest.subjects(label="pd")) == 13


def test_synth_counts_override(tmp_path):
    assert run(["synth"], tmp_path,
               ["synth.counts=pd:train:4,control:val:2"]) == 0
    manifest = dataio.read_manifest(tmp_path / "corpus" / "manifest.csv")
    assert manifest.counts_per_class() == {"pd": 4, "control": 2}


# ---------------------------------------------------------------------------
# full pipeline

def test_full_pipeline_emits_all_artifacts(tmp_path, capsys):
    manifest, ckpt = pipeline(tmp_path)
    for name in ("ganomaly_fold0.ckpt", "ganomaly_fold0.log",
                 "roc_ganomaly_fold0.csv", "scores_ganomaly_fold0.csv",
                 "components_ganomaly_fold0.csv", "metrics_ganomaly_fold0.json"):
        assert (tmp_path / name).exists(), name
    metrics = json.loads((tmp_path / "metrics_ganomaly_fold0.json").read_text())
    assert metrics["schema"] == 1 and metrics["model"] == "ganomaly"
    assert 0.0 <= metrics["auc"] <= 1.0
    assert set(metrics["anova"]) == {"enc", "ctx", "adv"}
    log = (tmp_path / "ganomaly_fold0.log").read_text().splitlines()
    assert log[0] == "epoch enc ctx adv gen disc"
    assert len(log) == 2          # header + one epoch

    assert run(["report", "--checkpoint", ckpt, "--manifest", manifest,
                "--fold", "0"], tmp_path) == 0
    report = tmp_path / "report"
    for name in ("input_pd.pgm", "reconstruction_pd.pgm", "spectrum_pd.pgm",
                 "input_control.pgm", "reconstruction_control.pgm",
                 "spectrum_control.pgm", "boxplot_components.csv"):
        assert (report / name).exists(), name


def test_eval_all_folds_summary(tmp_path):
    manifest = str(Path(tmp_path) / "corpus" / "manifest.csv")
    assert run(["synth"], tmp_path) == 0
    for fold in range(4):
        assert run(["train", "--manifest", manifest, "--fold", str(fold)],
                   tmp_path) == 0
    ckpt = str(Path(tmp_path) / "ganomaly_fold0.ckpt")
    assert run(["eval", "--checkpoint", ckpt, "--manifest", manifest,
                "--fold", "all"], tmp_path) == 0
    summary = json.loads(
        (tmp_path / "metrics_ganomaly_summary.json").read_text())
    assert summary["folds"] == 4
    assert len(summary["auc_per_fold"]) == 4
    assert summary["auc_mean"] == pytest.approx(
        np.mean(summary["auc_per_fold"]))
    mean_csv = (tmp_path / "roc_ganomaly_mean.csv").read_text().splitlines()
    assert mean_csv[0] == "fpr,tpr_mean,tpr_std"
    assert len(mean_csv) == 102


def test_anogan_pipeline(tmp_path):
    manifest = str(Path(tmp_path) / "corpus" / "manifest.csv")
    assert run(["synth"], tmp_path) == 0
    assert run(["train", "--manifest", manifest, "--fold", "0",
                "--model", "anogan"], tmp_path) == 0
    ckpt = str(Path(tmp_path) / "anogan_fold0.ckpt")
    assert run(["eval", "--checkpoint", ckpt, "--manifest", manifest,
                "--fold", "0"], tmp_path) == 0
    metrics = json.loads((tmp_path / "metrics_anogan_fold0.json").read_text())
    assert metrics["model"] == "anogan"
    assert set(metrics["anova"]) == {"score"}


# ---------------------------------------------------------------------------
# determinism and error funnel

def test_pipeline_is_byte_deterministic(tmp_path):
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        pipeline(out)
        artifacts = {}
        for p in sorted(out.rglob("*")):
            if p.is_file():
                artifacts[str(p.relative_to(out))] = p.read_bytes()
        outs.append(artifacts)
    assert outs[0].keys() == outs[1].keys()
    for name in outs[0]:
        assert outs[0][name] == outs[1][name], f"{name} differs between runs"


def test_corrupt_checkpoint_reported_with_category(tmp_path, capsys):
    manifest, ckpt = pipeline(tmp_path)
    raw = bytearray(Path(ckpt).read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    Path(ckpt).write_bytes(bytes(raw))
    assert run(["eval", "--checkpoint", ckpt, "--manifest", manifest,
                "--fold", "0"], tmp_path) == 1
    assert capsys.readouterr().err.startswith("error:checkpoint:")


def test_missing_manifest_is_io_or_validation_error(tmp_path, capsys):
    assert run(["train", "--manifest", str(tmp_path / "nope.csv"),
                "--fold", "0"], tmp_path) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:io:") or err.startswith("error:validation:")


def test_mismatched_fold_checkpoint_rejected(tmp_path, capsys):
    manifest, ckpt = pipeline(tmp_path)
    assert run(["eval", "--checkpoint", ckpt, "--manifest", manifest,
                "--fold", "1"], tmp_path) == 1
    assert capsys.readouterr().err.startswith("error:validation:")
