import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from triclust.cli import main
from triclust.config import save_config
from triclust.model import init_params, save_checkpoint

from .conftest import small_config


@pytest.fixture
def config_file(tmp_path):
    def write(**sections):
        path = tmp_path / "cfg.yaml"
        save_config(small_config(**sections), path)
        return path

    return write


def test_train_writes_run_directory(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_file(optim={"epochs": 3})), "--out", str(out)]) == 0
    assert "NMI" in capsys.readouterr().out
    lines = (out / "epochs.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert (out / "summary.csv").exists() and (out / "checkpoints" / "last.pt").exists()


def test_invalid_temperature_names_field(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("loss:\n  temperature: -1\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "x")]) != 0
    assert "temperature" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("optim:\n  learning_rate: 0.1\n")
    assert main(["train", "--config", str(p)]) != 0
    assert "learning_rate" in capsys.readouterr().err


def test_resume_reproduces_uninterrupted_metrics(config_file, tmp_path):
    cfg = config_file(optim={"epochs": 4}, run={"checkpoint_every": 2})
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    short = tmp_path / "short.yaml"
    save_config(small_config(optim={"epochs": 2}, run={"checkpoint_every": 2}), short)
    main(["train", "--config", str(short), "--out", str(tmp_path / "b")])
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")])
    last = [json.loads((tmp_path / d / "epochs.jsonl").read_text().splitlines()[-1]) for d in "ab"]
    assert last[0] == last[1]


def test_eval_matches_last_epoch(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(config_file(optim={"epochs": 2})), "--out", str(out)])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoints" / "last.pt"), "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "eval.json").read_text())
    last = json.loads((out / "epochs.jsonl").read_text().splitlines()[-1])
    for key in ("nmi", "acc", "ari"):
        assert abs(report[key] - last[key]) < 1e-9
    assert {"nmi_arithmetic", "nmi_geometric"} <= set(report)
    assert "ACC" in capsys.readouterr().out


def test_eval_rejects_cluster_count_mismatch(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(config_file(optim={"epochs": 1})), "--out", str(out)])
    other = tmp_path / "other.yaml"
    save_config(small_config(data={"synthetic": {"n_clusters": 3, "per_cluster": 8, "resolution": 8}}, model={"n_clusters": 3}), other)
    code = main(["eval", "--checkpoint", str(out / "checkpoints" / "last.pt"), "--config", str(other)])
    assert code != 0
    assert "M=2" in capsys.readouterr().err


def test_untrained_checkpoint_scores_near_chance(tmp_path):
    # four balanced classes and a random network: matching accuracy stays near 1/4
    cfg = small_config(
        data={"synthetic": {"n_clusters": 4, "per_cluster": 50, "resolution": 8}},
        model={"n_clusters": 4},
    )
    accs = []
    for seed in range(5):
        c = cfg.replace(run={"seed": seed})
        nets = init_params(c.model.backbone_spec(), 4, seed, c.model.head_spec())
        ck = tmp_path / f"init{seed}.pt"
        save_checkpoint(ck, nets, {"config": c.to_dict()})
        assert main(["eval", "--checkpoint", str(ck), "--out", str(tmp_path / f"e{seed}")]) == 0
        accs.append(json.loads((tmp_path / f"e{seed}" / "eval.json").read_text())["acc"])
    # best matching of a label-independent partition sits a little above 1/C
    assert 0.25 <= np.mean(accs) < 0.6


def test_curves_export(config_file, tmp_path):
    out = tmp_path / "run"
    main(["train", "--config", str(config_file(optim={"epochs": 10}, run={"checkpoint_every": 5})), "--out", str(out)])
    # shuffle the log to check the export sorts by epoch
    log = out / "epochs.jsonl"
    lines = log.read_text().splitlines()
    log.write_text("\n".join(lines[::-1]) + "\n")
    assert main(["curves", str(out)]) == 0
    rows = list(csv.reader(open(out / "curves.csv")))
    header, body = rows[0], rows[1:]
    assert len(body) == 10
    assert [int(r[0]) for r in body] == list(range(1, 11))
    source = {json.loads(line)["epoch"]: json.loads(line) for line in lines}
    for r in body:
        rec = source[int(r[0])]
        for name, text in zip(header, r):
            # the CSV cell holds exactly the text the log holds for that number
            assert text == json.dumps(rec[name])
    raw = {int(json.loads(line)["epoch"]): line for line in lines}
    for r in body:
        assert f'"nmi": {r[header.index("nmi")]}' in raw[int(r[0])]


def test_curves_missing_log(tmp_path, capsys):
    assert main(["curves", str(tmp_path)]) != 0
    assert "no epoch log" in capsys.readouterr().err


def test_ablate_csv_is_reproducible(config_file, tmp_path):
    cfg = config_file(optim={"epochs": 1})
    for name in ("a", "b"):
        assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / name), "--seeds", "0", "1"]) == 0
    a = (tmp_path / "a" / "ablation.csv").read_text()
    assert a == (tmp_path / "b" / "ablation.csv").read_text()
    rows = list(csv.DictReader(a.splitlines()))
    assert len(rows) == 8
    assert all(r["nmi"] and r["acc"] and r["ari"] for r in rows)


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "triclust", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for command in ("train", "eval", "ablate", "curves"):
        assert command in done.stdout
