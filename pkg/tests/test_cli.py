import json

import pytest

from mml import cli, io
from mml.pipeline import StageFailure
from mml.train import NumericalAbort

CONFIG = """
dataset: {num_clips_train: 16, num_clips_val: 8, t_total: 8, height: 16, width: 16, n_cls: 4, seed: 2}
model: {widths: [8, 8, 8], strides: [2, 2, 1]}
train:
  epochs: 1
  batch_size: 8
  lr: 0.05
  milestones: []
  sampling: {n_in: 2, tau: 1, test_k: 1, test_m: 1}
"""


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("MML_RUN_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("MML_FLOW_CACHE", str(tmp_path / "flow"))
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(CONFIG)
    return tmp_path, str(cfg)


def _run(capsys, argv):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


def test_generate(env, capsys):
    tmp, cfg = env
    code, out, _ = _run(capsys, ["generate", cfg])
    assert code == 0 and out["train"] == 16 and out["val"] == 8
    run_dir = tmp / "runs" / out["run_dir"].split("/")[-1]
    assert (run_dir / "data" / "train.mml").exists() and (run_dir / "config.yaml").exists()
    assert run_dir.name.endswith("_seed2_generate")


def test_train_with_zero_lr_keeps_init(env, capsys):
    tmp, cfg = env
    lr0 = tmp / "lr0.yaml"
    lr0.write_text(CONFIG.replace("lr: 0.05", "lr: 0.0"))
    code, out, _ = _run(capsys, ["train", str(lr0), "--modality", "Diff", "--run-dir", str(tmp / "t")])
    assert code == 0
    m = out["models"][0]
    assert m["sha256"] == io.file_hash(tmp / "t" / "model0_diff_init.mml")
    assert (tmp / "t" / "metrics.jsonl").exists()


def test_train_eval_plot(env, capsys):
    tmp, cfg = env
    code, out, _ = _run(capsys, ["train", cfg, "--method", "mutual", "--modality", "RGB,Flow",
                                 "--run-dir", str(tmp / "mut"), "--save-last"])
    assert code == 0 and len(out["models"]) == 2
    assert (tmp / "mut" / "model1_flow_last.mml").exists()
    ckpts = [m["checkpoint"] for m in out["models"]]

    code, out, _ = _run(capsys, ["eval", cfg, "--checkpoints", *ckpts, "--spec", "dense:1,uniform:2",
                                 "--run-dir", str(tmp / "ev")])
    assert code == 0 and out["clips_per_video"] == 3
    assert {r["model"] for r in out["results"]} >= {"ensemble"}
    assert all(r["clips_per_video"] == 3 for r in out["results"])
    assert (tmp / "ev" / "report.jsonl").exists() and (tmp / "ev" / "ensemble_grid.csv").exists()

    code, out, _ = _run(capsys, ["plot", str(tmp / "mut" / "metrics.jsonl"), "--out", str(tmp / "fig")])
    assert code == 0
    assert (tmp / "fig" / "curves.csv").read_text().startswith("source,model,split,epoch,metric,value")
    assert (tmp / "fig" / "curves.svg").read_text().lstrip().startswith("<?xml")


def test_distill_from_teacher(env, capsys):
    tmp, cfg = env
    _, out, _ = _run(capsys, ["train", cfg, "--modality", "Flow", "--run-dir", str(tmp / "teach")])
    teacher = out["models"][0]["checkpoint"]
    code, out, _ = _run(capsys, ["train", cfg, "--method", "d3d", "--teacher", teacher, "--run-dir", str(tmp / "st")])
    assert code == 0
    code, _, err = _run(capsys, ["train", cfg, "--method", "mars"])
    assert code == 2 and json.loads(err)["error"] == "input"


def test_pipeline_and_resume(env, capsys):
    tmp, cfg = env
    argv = ["pipeline", cfg, "--preset", "solo", "--modalities", "RGB,Diff"]
    code, out, _ = _run(capsys, argv)
    assert code == 0 and out["n_runs"] == 2 + 2 + 2 and out["trained_groups"] == 3
    code, out2, _ = _run(capsys, argv + ["--resume"])
    assert code == 0 and out2["run_dir"] == out["run_dir"] and out2["trained_groups"] == 0


def test_exit_codes(env, capsys, monkeypatch):
    tmp, cfg = env
    bad = tmp / "bad.yaml"
    bad.write_text("train:\n  lr: 0.1\n  lrr: 0.2\n")
    code, _, err = _run(capsys, ["train", str(bad)])
    assert code == 2
    e = json.loads(err)
    assert e["error"] == "config" and e["line"] == 3

    code, _, err = _run(capsys, ["train", str(tmp / "nope.yaml")])
    assert code == 2

    code, _, err = _run(capsys, ["train", cfg, "--init", str(tmp / "missing.mml")])
    assert code == 2 and json.loads(err)["error"] == "input"

    code, _, _ = _run(capsys, ["eval", cfg, "--checkpoints", str(tmp / "missing.mml")])
    assert code == 2
    code, _, _ = _run(capsys, ["eval", cfg, "--spec", "dense:0"])
    assert code == 2

    def stage_fail(*a, **kw):
        raise StageFailure("2", "boom")

    monkeypatch.setattr(cli, "run_pipeline", stage_fail)
    code, _, err = _run(capsys, ["pipeline", cfg, "--modalities", "RGB,Diff"])
    assert code == 3 and json.loads(err)["stage"] == "2"

    def nan_train(*a, **kw):
        raise NumericalAbort("non-finite loss")

    monkeypatch.setattr(cli, "train_single", nan_train)
    code, _, err = _run(capsys, ["train", cfg])
    assert code == 4 and json.loads(err)["error"] == "numerical"


def test_plot_rejects_garbage(env, capsys):
    tmp, _ = env
    p = tmp / "junk.jsonl"
    p.write_text("not json\n")
    code, _, err = _run(capsys, ["plot", str(p), "--out", str(tmp / "o")])
    assert code == 2 and "junk.jsonl:1" in json.loads(err)["message"]
