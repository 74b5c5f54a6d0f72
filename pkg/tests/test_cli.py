import json
import subprocess
import sys

import pytest
import yaml

from guidelab.analysis import read_curves
from guidelab.cli import main
from guidelab.harness import read_log

FCN = dict(family="fcn", depth=2, width=16, classes=3, input_dim=64)


@pytest.fixture
def data(tmp_path):
    d = tmp_path / "data"
    assert main(["gen-data", "--task", "image", "--out", str(d), "--n", "120", "--classes", "3",
                 "--image-size", "8"]) == 0
    return d


def write_cfg(tmp_path, data, **kw):
    c = dict(experiment_id="cli", task="image", data={"dir": str(data)}, target_spec=FCN, lr=0.01,
             batch_size=16, epochs=2, seeds=[0, 1], out_dir=str(tmp_path / "runs"))
    c.update(kw)
    p = tmp_path / f"{c['experiment_id']}.yaml"
    p.write_text(yaml.safe_dump(c))
    return str(p)


def test_gen_data_all_tasks(tmp_path, capsys):
    for task in ("copy", "parity"):
        assert main(["gen-data", "--task", task, "--out", str(tmp_path / task), "--n", "50"]) == 0
        man = json.loads(capsys.readouterr().out)
        assert man["task"] == task and "ids" not in man
    corpus = tmp_path / "c.txt"
    corpus.write_text("hello world " * 200)
    assert main(["gen-data", "--task", "lm", "--out", str(tmp_path / "lm"), "--corpus", str(corpus)]) == 0
    assert main(["gen-data", "--task", "lm", "--out", str(tmp_path / "lm2")]) == 2


def test_train_eval_compare_plot(tmp_path, data, capsys):
    cfg = write_cfg(tmp_path, data)
    assert main(["train", "--config", cfg, "--epochs", "3"]) == 0
    summ = json.loads(capsys.readouterr().out)
    assert summ["epochs"] == [1, 2, 3] and summ["seeds"] == [0, 1]
    exp = tmp_path / "runs" / "cli"
    preds = []
    for sd in (0, 1):
        p = tmp_path / f"p{sd}.csv"
        assert main(["eval", "--checkpoint", str(exp / f"seed_{sd}" / "best.glab"), "--data-dir", str(data),
                     "--predictions", str(p)]) == 0
        res = json.loads(capsys.readouterr().out)
        assert 0 <= res["accuracy"] <= 1 and p.exists()
        preds.append(str(p))
    assert main(["compare-errors", *preds]) == 0
    k = json.loads(capsys.readouterr().out)
    assert set(k) == {"c_obs", "c_exp", "kappa"}
    assert main(["plot", str(exp / "log.csv"), "--out", str(tmp_path / "c.csv"), "--column", "task_loss"]) == 0
    (s,) = read_curves(tmp_path / "c.csv")
    assert s.n_seeds == 2
    assert main(["plot", str(exp / "log.csv"), "--out", str(tmp_path / "c.svg")]) == 0
    assert (tmp_path / "c.svg").read_text().lstrip().startswith("<?xml")


def test_train_guide_then_guide(tmp_path, data, capsys):
    cfg = write_cfg(tmp_path, data, experiment_id="g")
    out = tmp_path / "guide.glab"
    assert main(["train-guide", "--config", cfg, "--output", str(out)]) == 0
    assert out.exists()
    capsys.readouterr()
    cfg2 = write_cfg(tmp_path, data, experiment_id="t", seeds=[0])
    assert main(["guide", "--config", cfg2, "--guide-checkpoint", str(out), "--guide-mode", "trained",
                 "--metric", "cka", "--set", "guidance.disconnect_after_steps=5"]) == 0
    rows = [r for r in read_log(tmp_path / "runs" / "t" / "log.csv") if r["split"] == "train"]
    assert rows[0]["dissim_loss"] > 0 and all(r["dissim_loss"] == 0 for r in rows if r["step"] > 5)
    # guide without guidance is refused
    assert main(["guide", "--config", cfg2]) == 2


def test_sweep_lr(tmp_path, data, capsys):
    cfg = write_cfg(tmp_path, data, experiment_id="s", seeds=[0], epochs=4)
    assert main(["sweep-lr", "--config", cfg, "--lrs", "1e-3", "3e-3", "1e-2", "3e-2", "1e-1"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["chosen_lr"] in (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
    assert (tmp_path / "runs" / "s_sweep" / "sweep.json").exists()


def test_config_errors_exit_2(tmp_path, data, capsys):
    cfg = write_cfg(tmp_path, data)
    assert main(["train", "--config", cfg, "--set", "lr=-1"]) == 2
    assert main(["train", "--config", cfg, "--set", "nokey"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert "error:" in capsys.readouterr().err


def test_console_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "guidelab.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "train", "train-guide", "guide", "sweep-lr", "eval", "compare-errors", "plot"):
        assert cmd in r.stdout


def test_shipped_configs_validate():
    from pathlib import Path

    from guidelab.config import load_config
    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
    assert len(paths) >= 4
    for p in paths:
        load_config(p)
