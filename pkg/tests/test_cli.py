import csv
import json

import numpy as np
import pytest

import rsds.model
from rsds.cli import DEFAULTS, main
from rsds.io import load_checkpoint
from rsds.manifold import ManifoldSpec

S2 = ManifoldSpec.sphere(2)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["preprocess", "synthetic:S", str(root / "demos.json"), "--seed", "1"]) == 0
    assert main(["train", str(root / "demos.json"), str(root / "run"), "--epochs", "4", "--hidden", "8", "--rbf-centers", "10"]) == 0
    return root


def test_preprocess_outputs_and_idempotence(work, tmp_path):
    obj = json.loads((work / "demos.json").read_text())
    assert obj["spec"] == S2.to_dict() and len(obj["demos"]) == 3
    assert obj["run_config"]["seed"] == 1 and obj["run_config"]["input"] == "synthetic:S"
    assert main(["preprocess", "synthetic:S", str(tmp_path / "again.json"), "--seed", "1"]) == 0
    assert (tmp_path / "again.json").read_bytes() == (work / "demos.json").read_bytes()


def test_preprocess_from_csv_and_pose(tmp_path):
    t = np.arange(40) * 0.05
    rows = ["t,x0,x1"] + [f"{a},{np.cos(a)},{np.sin(a)}" for a in t]
    (tmp_path / "raw.csv").write_text("\n".join(rows) + "\n")
    assert main(["preprocess", str(tmp_path / "raw.csv"), str(tmp_path / "d.json")]) == 0
    assert main(["preprocess", "synthetic:pose", str(tmp_path / "p.json")]) == 0
    assert json.loads((tmp_path / "p.json").read_text())["spec"] == ManifoldSpec.parse("R3xS3").to_dict()


def test_missing_input_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["preprocess", str(missing), str(tmp_path / "o.json")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_demos": 2, "seed": 5}))
    assert main(["preprocess", "synthetic:W", str(tmp_path / "d.json"), "--config", str(cfg), "--seed", "6"]) == 0
    run = json.loads((tmp_path / "d.json").read_text())["run_config"]
    assert run["n_demos"] == 2 and run["seed"] == 6 and run["lr"] == DEFAULTS["lr"]
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["preprocess", "synthetic:W", str(tmp_path / "d.json"), "--config", str(cfg)]) == 2


def test_train_outputs_and_reproducibility(work, tmp_path):
    model, obj = load_checkpoint(work / "run" / "checkpoint.json")
    assert obj["run_config"]["epochs"] == 4 and obj["run_config"]["hidden"] == 8
    loss = read_rows(work / "run" / "loss.csv")
    assert [int(r["epoch"]) for r in loss] == [0, 1, 2, 3]
    assert json.loads((work / "run" / "loss.csv.run.json").read_text())["epochs"] == 4
    assert main(["train", str(work / "demos.json"), str(tmp_path / "r2"), "--epochs", "4", "--hidden", "8", "--rbf-centers", "10"]) == 0
    assert (tmp_path / "r2" / "loss.csv").read_bytes() == (work / "run" / "loss.csv").read_bytes()


def test_interrupted_training_leaves_valid_checkpoint(work, tmp_path, monkeypatch):
    real = rsds.model.adam_step
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > 3:
            raise KeyboardInterrupt
        return real(*a, **k)

    monkeypatch.setattr(rsds.model, "adam_step", flaky)
    with pytest.raises(KeyboardInterrupt):
        main(["train", str(work / "demos.json"), str(tmp_path / "r"), "--epochs", "10", "--hidden", "8", "--rbf-centers", "10", "--checkpoint-every", "2"])
    model, obj = load_checkpoint(tmp_path / "r" / "checkpoint.json")
    assert len(obj["loss_history"]) >= 2
    assert model.predict_velocity(S2.retract(model.goal + 0.3)).shape == (3,)


def test_eval_report(work, tmp_path):
    out = tmp_path / "rep.json"
    args = ["eval", str(work / "run" / "checkpoint.json"), "--demos", str(work / "demos.json"), "--sweep-n", "20", "--out", str(out)]
    assert main(args) == 0
    rep = json.loads(out.read_text())
    assert rep["success_rate"] == 1.0 and rep["n_rollouts"] == 20 and len(rep["dtwd"]) == 1
    assert read_rows(out.with_suffix(".csv"))[0]["model"] == "rsds"
    assert json.loads((tmp_path / "rep.csv.run.json").read_text())["sweep_n"] == 20


def test_eval_baseline_modes(work, tmp_path):
    assert main(["train", str(work / "demos.json"), str(tmp_path / "b"), "--epochs", "2", "--hidden", "8", "--rbf-centers", "10", "--baseline", "euclidean"]) == 0
    reps = {}
    for mode in ("euclidean", "projected"):
        out = tmp_path / f"{mode}.json"
        assert main(["eval", str(tmp_path / "b" / "checkpoint.json"), "--baseline", mode, "--sweep-n", "10", "--horizon", "5", "--out", str(out)]) == 0
        reps[mode] = json.loads(out.read_text())
    assert set(reps["euclidean"]) == set(reps["projected"])
    assert reps["projected"]["max_manifold_deviation"] < 1e-12


def test_sweep_csv(work, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", str(work / "run" / "checkpoint.json"), str(out), "--sweep-n", "15"]) == 0
    rows = read_rows(out)
    assert len(rows) == 15 and all(r["converged"] == "1" for r in rows)


def test_export_field(work, tmp_path):
    out = tmp_path / "field.csv"
    assert main(["export-field", str(work / "run" / "checkpoint.json"), str(out), "--grid-density", "100"]) == 0
    rows = read_rows(out)
    assert len(rows) == 100
    x = np.array([[float(r[f"x{i}"]) for i in range(3)] for r in rows])
    v = np.array([[float(r[f"v{i}"]) for i in range(3)] for r in rows])
    assert np.max(np.abs(np.sum(x * v, 1))) <= 1e-9
    lyap = np.array([float(r["lyapunov"]) for r in rows])
    model, _ = load_checkpoint(work / "run" / "checkpoint.json")
    nearest = int(np.argmin(np.linalg.norm(x - model.goal.numpy(), axis=1)))
    assert lyap[nearest] == 0.0 and np.count_nonzero(lyap == 0.0) == 1


def test_rollout_and_perturbation(work, tmp_path):
    ckpt = str(work / "run" / "checkpoint.json")
    out = tmp_path / "r.csv"
    assert main(["rollout", ckpt, str(out), "--start", "0.6,0,0.8", "--dt", "0.02"]) == 0
    plain = read_rows(out)
    assert float(plain[-1]["lyapunov"]) < float(plain[0]["lyapunov"])
    assert main(["rollout", ckpt, str(out), "--start", "0.6,0,0.8", "--perturb-at", "5", "--perturb-to", "0,0.6,-0.8"]) == 0
    rows = read_rows(out)
    jump = np.linalg.norm([float(rows[5][f"x{i}"]) - float(rows[4][f"x{i}"]) for i in range(3)])
    assert jump > 0.5
    assert abs(float(rows[5]["x1"]) - 0.6) < 1e-15
    run = json.loads((tmp_path / "r.csv.run.json").read_text())
    assert run["perturb_at"] == 5


def test_rollout_start_off_manifold(work, tmp_path, capsys):
    assert main(["rollout", str(work / "run" / "checkpoint.json"), str(tmp_path / "r.csv"), "--start", "0,0,2"]) == 2
    assert "off the manifold" in capsys.readouterr().err
    assert main(["rollout", str(work / "run" / "checkpoint.json"), str(tmp_path / "r.csv"), "--start", "0,0,1", "--perturb-at", "3"]) == 2
