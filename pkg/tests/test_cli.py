import hashlib
import json

import pytest

from mvcnet import data as D
from mvcnet import training as T
from mvcnet.cli import main
from mvcnet.network import NetworkSpec, fc, mvc, mvfc, softmax, trelu


def tiny_train_config(path, data_path=None):
    spec = NetworkSpec({"kind": "spd", "n": 3}, (6, 6), 1, "classification",
                       [mvc(1, (3, 3), padding="periodic", anchor="center"), trelu(), mvfc(), fc(2), softmax()])
    cfg = T.TrainConfig(network=spec.to_dict(), epochs=2, folds=2, batch_size=5,
                        dataset=None if data_path else D.DatasetSpec("SpdImageClass", 10, (6, 6), 0.05, 2, 0).to_dict(),
                        dataset_path=str(data_path) if data_path else None)
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_gen_deterministic_with_checksum(tmp_path, capsys):
    a, b = tmp_path / "a.mvt", tmp_path / "b.mvt"
    assert main(["gen", "--preset", "spd-class-small", "--n-samples", "10", "--out", str(a)]) == 0
    out = capsys.readouterr().out
    assert main(["gen", "--preset", "spd-class-small", "--n-samples", "10", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert f"sha256 {hashlib.sha256(a.read_bytes()).hexdigest()}" in out
    assert len(D.read_dataset(a)) == 10


def test_gen_invalid_sigma_names_field(tmp_path, capsys):
    code = main(["gen", "--preset", "spd-class-small", "--sigma", "-1", "--out", str(tmp_path / "x.mvt")])
    assert code == 1
    assert "sigma" in capsys.readouterr().err
    assert not (tmp_path / "x.mvt").exists()


def test_gen_from_config(tmp_path):
    cfg = tmp_path / "d.json"
    cfg.write_text(json.dumps(D.DatasetSpec("SpdSequenceAngle", 4, (5,), 0.05, 2, 1).to_dict()))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "s.mvt")]) == 0
    assert D.read_dataset(tmp_path / "s.mvt").manifold.n == 4


@pytest.mark.parametrize("argv", [
    ["gen", "--preset", "spd-class-small", "--config", "x.json"],
    ["gen", "--config", "does-not-exist.json"],
    ["gen", "--preset", "nope"],
    ["train", "--data", "does-not-exist.mvt"],
    ["train", "--preset", "spd-class-small", "--lr", "0"],
    ["grad-check", "--coords", "0"],
])
def test_validation_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_usage_error_exits_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--epochs", "many"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1


def test_train_then_eval(tmp_path, capsys):
    data = tmp_path / "d.mvt"
    D.write_dataset(D.generate(D.DatasetSpec("SpdImageClass", 10, (6, 6), 0.05, 2, 0)), data)
    cfg = tiny_train_config(tmp_path / "cfg.json", data)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run), "--single-thread"]) == 0
    out = capsys.readouterr().out
    assert "2-fold accuracy" in out
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["dataset_sha256"] == hashlib.sha256(data.read_bytes()).hexdigest()
    logged = json.loads((run / "results.json").read_text())["final_train"]["accuracy"]

    rec = tmp_path / "eval.json"
    assert main(["eval", str(run / "model.ckpt"), str(data), "--out", str(rec)]) == 0
    out = capsys.readouterr().out
    assert "time/sample" in out
    r = json.loads(rec.read_text())
    assert r["accuracy"] >= logged - 1e-9
    assert r["seconds_per_sample"] > 0
    assert r["n_params"] > 0 and r["loss"] >= 0


def test_eval_empty_dataset(tmp_path, capsys):
    ds = D.generate(D.DatasetSpec("SpdImageClass", 4, (6, 6), 0.0, 2, 0))
    empty = tmp_path / "empty.mvt"
    D.write_dataset(ds.subset([]), empty)
    cfg = tiny_train_config(tmp_path / "cfg.json")
    T.run(T.TrainConfig.load(cfg), tmp_path / "run")
    assert main(["eval", str(tmp_path / "run" / "model.ckpt"), str(empty)]) == 1
    assert "empty" in capsys.readouterr().err


def test_eval_mismatched_dataset(tmp_path, capsys):
    cfg = tiny_train_config(tmp_path / "cfg.json")
    T.run(T.TrainConfig.load(cfg), tmp_path / "run")
    seq = tmp_path / "seq.mvt"
    D.write_dataset(D.generate(D.DatasetSpec("SpdSequenceAngle", 4, (5,), 0.05, 2, 0)), seq)
    assert main(["eval", str(tmp_path / "run" / "model.ckpt"), str(seq)]) == 1
    assert "disagree" in capsys.readouterr().err


def test_eval_checkpoint_version_mismatch(tmp_path, capsys):
    cfg = tiny_train_config(tmp_path / "cfg.json")
    T.run(T.TrainConfig.load(cfg), tmp_path / "run")
    ckpt = tmp_path / "run" / "model.ckpt"
    ckpt.write_bytes(ckpt.read_bytes().replace(b"mvcnet-ckpt-v1", b"mvcnet-ckpt-v9", 1))
    data = tmp_path / "d.mvt"
    D.write_dataset(D.generate(D.DatasetSpec("SpdImageClass", 4, (6, 6), 0.0, 2, 0)), data)
    assert main(["eval", str(ckpt), str(data)]) == 1
    err = capsys.readouterr().err
    assert "mvcnet-ckpt-v9" in err and "mvcnet-ckpt-v1" in err


def test_verify_zero_trials_is_vacuous(capsys):
    assert main(["verify", "--trials", "0"]) == 0
    captured = capsys.readouterr()
    assert "vacuous" in captured.err
    assert "0/0 properties passed" in captured.out


def test_verify_inject_fault_exits_2(tmp_path, capsys):
    out = tmp_path / "report.json"
    code = main(["verify", "--trials", "3", "--no-grad", "--inject-fault", "--out", str(out)])
    assert code == 2
    text = capsys.readouterr().out
    assert "FAIL range_equivariance" in text
    assert "witness for range_equivariance" in text
    rep = json.loads(out.read_text())
    assert rep["passed"] is False


def test_verify_small_run_passes(capsys):
    assert main(["verify", "--manifold", "sphere", "--trials", "5"]) == 0
    assert "FAIL" not in capsys.readouterr().out
