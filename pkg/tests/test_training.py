import json

import numpy as np
import pytest

from mvcnet import data as D
from mvcnet import training as T
from mvcnet.errors import DivergenceError, PoisonedGradientError, ValidationError
from mvcnet.network import NetworkSpec, fc, mvc, mvfc, softmax, trelu

SPD3 = {"kind": "spd", "n": 3}


def head_only(dims=(6, 6), classes=2):
    return NetworkSpec(SPD3, dims, 1, "classification", [mvfc(), fc(classes), softmax()])


def tiny_config(spec, **kw):
    d = dict(network=spec.to_dict(), dataset=D.DatasetSpec("SpdImageClass", 20, (6, 6), 0.0, 2, 0).to_dict(),
             epochs=3, folds=2, single_thread=True)
    d.update(kw)
    return T.TrainConfig(**d)


def test_fold_indices_partition():
    folds = T.fold_indices(23, 5, 1)
    allidx = np.concatenate(folds)
    assert np.array_equal(np.sort(allidx), np.arange(23))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert all(np.array_equal(a, b) for a, b in zip(folds, T.fold_indices(23, 5, 1)))
    with pytest.raises(ValidationError):
        T.fold_indices(3, 5, 0)


def test_metrics():
    assert T.accuracy(np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]), [0, 1, 1]) == pytest.approx(2 / 3)
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert T.r_squared(y, y) == 1.0
    assert T.r_squared(np.full(4, y.mean()), y) == 0.0
    assert np.isnan(T.r_squared(y, np.ones(4)))


@pytest.mark.parametrize("field, value, text", [
    ("epochs", 0, "epochs"),
    ("lr", -1.0, "lr"),
    ("lr", float("inf"), "lr"),
    ("batch_size", 0, "batch_size"),
    ("folds", 1, "folds"),
])
def test_config_validation(field, value, text):
    cfg = tiny_config(head_only())
    setattr(cfg, field, value)
    with pytest.raises(ValidationError, match=text):
        cfg.validate()


def test_config_needs_one_dataset_source():
    cfg = tiny_config(head_only(), dataset_path="x.mvt")
    with pytest.raises(ValidationError, match="exactly one"):
        cfg.validate()


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = tiny_config(head_only())
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert T.TrainConfig.load(path).to_dict() == cfg.to_dict()
    with pytest.raises(ValidationError, match="unknown config keys"):
        T.TrainConfig.from_dict(dict(cfg.to_dict(), momentum=0.9))
    path.write_text("{not json")
    with pytest.raises(ValidationError):
        T.TrainConfig.load(path)


@pytest.mark.parametrize("name", T.PRESET_NAMES)
def test_presets_are_consistent(name):
    cfg = T.preset_config(name).validate()
    ds = D.generate(D.preset(name, n_samples=12))
    T._check_compatible(NetworkSpec.from_dict(cfg.network), ds)
    assert cfg.lr == 0.005 and cfg.folds == 10


def test_class_preset_architecture():
    kinds = [ly["type"] for ly in T.preset_config("spd-class-small").network["layers"]]
    assert kinds == ["mvc", "trelu"] * 5 + ["mvfc", "fc", "fc", "softmax"]


def test_preset_overrides():
    cfg = T.preset_config("spd-class-small", epochs=2, lr=None)
    assert cfg.epochs == 2 and cfg.lr == 0.005
    with pytest.raises(ValidationError, match="unknown preset"):
        T.preset_config("imagenet")


def test_incompatible_network_rejected():
    ds = D.generate(D.DatasetSpec("SpdImageClass", 8, (6, 6), 0.0, 2, 0))
    with pytest.raises(ValidationError, match="does not match"):
        T._check_compatible(head_only((5, 5)), ds)
    with pytest.raises(ValidationError, match="outputs"):
        T._check_compatible(head_only(classes=1), D.generate(D.DatasetSpec("SpdImageClass", 9, (6, 6), 0.0, 3, 0)))
    seq = D.generate(D.DatasetSpec("SpdSequenceAngle", 4, (6,), 0.0, 2, 0))
    with pytest.raises(ValidationError, match="SPD"):
        T._check_compatible(NetworkSpec(SPD3, (6,), 1, "classification", [mvfc(), fc(2), softmax()]), seq)


def test_head_only_network_fits_noise_free_data():
    ds = D.generate(D.DatasetSpec("SpdImageClass", 20, (6, 6), 0.0, 2, 0))
    cfg = tiny_config(head_only(), epochs=60, batch_size=20, lr=0.05)
    net, records = T.train(head_only(), ds, cfg, seed=0)
    assert T.evaluate(net, ds)["accuracy"] == 1.0
    assert records[-1]["loss"] < records[0]["loss"]
    assert [r["epoch"] for r in records] == list(range(60))


def test_train_is_deterministic():
    spec = NetworkSpec(SPD3, (6, 6), 1, "classification",
                       [mvc(1, (3, 3), padding="periodic", anchor="center"), trelu(), mvfc(), fc(2), softmax()])
    ds = D.generate(D.DatasetSpec("SpdImageClass", 8, (6, 6), 0.05, 2, 0))
    cfg = tiny_config(spec, epochs=2, batch_size=4)
    a, ra = T.train(spec, ds, cfg, seed=5)
    b, rb = T.train(spec, ds, cfg, seed=5)
    assert ra == rb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_train_records_eval_and_callback():
    ds = D.generate(D.DatasetSpec("SpdImageClass", 8, (6, 6), 0.0, 2, 0))
    seen = []
    _, recs = T.train(head_only(), ds, tiny_config(head_only(), epochs=2), 0, eval_ds=ds,
                      on_epoch=lambda r, s: seen.append(s))
    assert len(seen) == 2 and all(s >= 0 for s in seen)
    assert recs[0]["eval"]["n"] == 8
    assert "seconds" not in json.dumps(recs)


def regression_ds(targets):
    ds = D.generate(D.DatasetSpec("SpdRegression", len(targets), (5,), 0.5, 1, 0))
    ds.targets = np.asarray(targets, dtype=float)
    return ds


def regression_spec():
    return NetworkSpec(SPD3, (5,), 1, "regression", [mvfc(), fc(1)])


def test_non_finite_loss_is_reported():
    ds = regression_ds([0.1, np.nan, 0.3, 0.2])
    with pytest.raises(PoisonedGradientError, match="epoch 0, batch 0"):
        T.train(regression_spec(), ds, tiny_config(regression_spec(), dataset=None, dataset_path="x"), 0)


def test_divergence_is_reported():
    ds = regression_ds([1e5, -1e5, 1e5, -1e5])
    with pytest.raises(DivergenceError, match="exceeds"):
        T.train(regression_spec(), ds, tiny_config(regression_spec(), dataset=None, dataset_path="x"), 0)


def test_cross_validate_serial_equals_pool(monkeypatch):
    ds = D.generate(D.DatasetSpec("SpdImageClass", 12, (6, 6), 0.05, 2, 3))
    cfg = tiny_config(head_only(), folds=3, epochs=2)
    serial = T.cross_validate(ds, cfg)
    monkeypatch.setenv("MVCNET_THREADS", "2")
    cfg.single_thread = False
    pooled = T.cross_validate(ds, cfg)
    assert serial.folds == pooled.folds
    assert serial.records == pooled.records
    assert len(serial.folds) == 3 and serial.metric == "accuracy"
    assert serial.mean == pytest.approx(np.mean([f["accuracy"] for f in serial.folds]))


def test_run_writes_artifacts(tmp_path):
    cfg = tiny_config(head_only(), epochs=2)
    res = T.run(cfg, tmp_path)
    for name in ("manifest.json", "metrics.jsonl", "timing.jsonl", "results.json", "model.ckpt"):
        assert (tmp_path / name).exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["dataset_sha256"] == D.generate(D.DatasetSpec.from_dict(cfg.dataset)).checksum()
    assert set(manifest["versions"]) >= {"mvcnet", "numpy", "python"}
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 2 + 2
    assert res["cv"]["metric"] == "accuracy"
