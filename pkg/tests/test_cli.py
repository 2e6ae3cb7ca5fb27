import json

import numpy as np
import pytest

from tiny_pipeline import TINY, artifact_bytes, run_tiny
from ventrigen.cli import ARTIFACTS, main


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return out, run_tiny(out)


def test_report_without_runs(tmp_path, capsys):
    assert main(["report", f"--out_dir={tmp_path}"]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["summary"] == {}


def test_sweep_without_models_exits_3(tmp_path, capsys):
    assert main(["sweep", f"--out_dir={tmp_path}"]) == 3
    err = capsys.readouterr().err
    assert "train-mask-dm" in err and "mask_dm.vgck" in err


def test_bad_config_exits_2(tmp_path, capsys):
    assert main(["report", f"--out_dir={tmp_path}", "--diffusion.beta_start=2.0"]) == 2
    assert "diffusion.beta_start" in capsys.readouterr().err
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("diffusion.T = many\n")
    assert main(["report", "--config", str(cfg)]) == 2


def test_env_var_sets_output_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("VENTRIGEN_OUT", str(tmp_path / "env"))
    assert main(["report", f"--out_dir={tmp_path / 'flag'}"]) == 0
    assert (tmp_path / "env" / "report.json").exists() and not (tmp_path / "flag").exists()


def test_corrupt_checkpoint_exits_4(tmp_path, capsys):
    (tmp_path / "models").mkdir()
    for name in ("mask_ae", "mask_dm"):
        (tmp_path / "models" / f"{name}.vgck").write_bytes(b"not a checkpoint")
    assert main(["sample-mask", f"--out_dir={tmp_path}", "--c=0.5", f"--out={tmp_path / 'x.npy'}"]) == 4


def test_tiny_pipeline_all_steps_succeed(tiny_run):
    out, codes = tiny_run
    assert codes == [0] * len(codes)
    for rel, _ in ARTIFACTS.values():
        assert (out / rel).exists(), rel


def test_every_artifact_traces_to_a_record(tiny_run):
    out, _ = tiny_run
    records = [json.loads(l) for l in (out / "runs.jsonl").read_text().splitlines()]
    assert all(len(r["config_hash"]) == 64 and r["status"] == 0 for r in records)
    emitted = {a for r in records for a in r["artifacts"]}
    for p in out.rglob("*"):
        if p.is_file() and p.name != "runs.jsonl":
            assert str(p) in emitted, p


def test_metrics_file_layout(tiny_run):
    out, _ = tiny_run
    lines = (out / "eval" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "model,metric,mean,std"
    assert {l.split(",")[0] for l in lines[1:13]} == {"real", "syn", "aug"}
    snap = (out / "config" / "evaluate.cfg").read_text()
    assert "diffusion.T = 20\n" in snap


def test_sampling_subcommands(tiny_run, tmp_path, capsys):
    out, _ = tiny_run
    masks = tmp_path / "m.npy"
    assert main(["sample-mask", f"--out_dir={out}", "--c=0.5", "--count=2", "--steps=2", f"--out={masks}", *TINY]) == 0
    labels = np.load(masks)
    assert labels.shape == (2, 64, 64) and labels.max() <= 2
    imgs = tmp_path / "i.npy"
    assert main(["sample-image", f"--out_dir={out}", f"--mask-file={masks}", "--steps=2", f"--out={imgs}", *TINY]) == 0
    assert np.load(imgs).shape == (2, 1, 64, 64)


@pytest.mark.slow
def test_tiny_rerun_is_bit_identical(tiny_run, tmp_path):
    out, _ = tiny_run
    assert run_tiny(tmp_path) == [0] * 11
    a, b = artifact_bytes(out), artifact_bytes(tmp_path)
    # the first directory may also hold snapshots from the sampling subcommands
    assert set(b) <= set(a) and len(b) > 20
    assert all(a[k] == b[k] for k in b), [k for k in b if a[k] != b[k]]
    hashes = lambda d: [json.loads(l)["config_hash"] for l in (d / "runs.jsonl").read_text().splitlines()[:11]]
    assert hashes(out) == hashes(tmp_path)
