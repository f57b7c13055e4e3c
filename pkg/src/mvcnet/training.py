"""Minibatch Adam training, k-fold cross-validation and run artifacts.

A run directory holds ``manifest.json`` (config, seed, library versions,
dataset checksum), ``metrics.jsonl`` (one record per fold and epoch, free of
wall-clock values so reruns are bit-identical), ``timing.jsonl`` (wall-clock
seconds), ``results.json`` and the final ``model.ckpt``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import Dataset, DatasetSpec, generate, preset as data_preset
from .errors import DivergenceError, PoisonedGradientError, ValidationError
from .network import Network, NetworkSpec, build_network, fc, mvc, mvfc, save_checkpoint, softmax, trelu

log = logging.getLogger(__name__)

CLIP_NORM = 10.0
DIVERGENCE_LOSS = 1e6


@dataclass
class TrainConfig:
    network: dict
    dataset: dict | None = None
    dataset_path: str | None = None
    epochs: int = 20
    lr: float = 0.005
    batch_size: int = 20
    folds: int = 10
    seed: int = 0
    clip: float = CLIP_NORM
    single_thread: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.lr > 0 or not math.isfinite(self.lr):
            raise ValidationError(f"lr must be a positive finite number, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if (self.dataset is None) == (self.dataset_path is None):
            raise ValidationError("give exactly one of dataset (spec) or dataset_path")
        NetworkSpec.from_dict(self.network).validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path}: {exc}") from None


def load_dataset(config: TrainConfig) -> Dataset:
    from .data import read_dataset

    if config.dataset_path is not None:
        return read_dataset(config.dataset_path)
    return generate(DatasetSpec.from_dict(config.dataset))


# presets -----------------------------------------------------------------------


def _spd(n):
    return {"kind": "spd", "n": n}


def class_network(dims=(6, 6), classes=2, depth=5):
    # centre-pixel anchors let a five-layer stack learn to amplify local
    # contrast until pixels leave double precision; window means do not
    layers = []
    for _ in range(depth):
        layers += [mvc(1, (3,) * len(dims), padding="periodic", anchor="window_fm"), trelu()]
    layers += [mvfc(), fc(8, "relu"), fc(classes), softmax()]
    return NetworkSpec(_spd(3), dims, 1, "classification", layers)


def regression_network(sites=40, depth=3):
    layers = []
    for _ in range(depth):
        layers += [mvc(1, (3,), padding="none", anchor="center"), trelu("image_fm")]
    layers += [mvfc(), fc(16, "relu"), fc(1)]
    return NetworkSpec(_spd(3), (sites,), 1, "regression", layers)


def sequence_network(frames=20, classes=2, depth=2):
    # deeper stacks with tangent clipping squash the short descriptor paths
    # before MVFC sees them; two temporal layers keep the speed signal intact
    layers = []
    for _ in range(depth):
        layers += [mvc(1, (3,), padding="none", anchor="center"), trelu("image_fm")]
    layers += [mvfc(), fc(16, "relu"), fc(classes), softmax()]
    return NetworkSpec(_spd(4), (frames,), 1, "classification", layers)


def _preset_configs():
    return {
        "spd-class-small": dict(network=class_network(), epochs=6),
        "spd-regression": dict(network=regression_network(), epochs=30),
        "spd-seq-30-60": dict(network=sequence_network(), epochs=30, batch_size=10),
        "spd-seq-10-15": dict(network=sequence_network(), epochs=60, batch_size=10),
        "spd-seq-10-15-20": dict(network=sequence_network(classes=3), epochs=60, batch_size=10),
    }


PRESET_NAMES = tuple(_preset_configs())


def preset_config(name: str, **overrides) -> TrainConfig:
    presets = _preset_configs()
    if name not in presets:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    p = presets[name]
    cfg = TrainConfig(network=p["network"].to_dict(), dataset=data_preset(name).to_dict(),
                      epochs=p["epochs"], batch_size=p.get("batch_size", 20), seed=data_preset(name).seed)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg


# metrics ------------------------------------------------------------------------


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=-1) == np.asarray(labels).astype(int)))


def r_squared(pred, target) -> float:
    target = np.asarray(target, dtype=np.float64)
    ss_res = float(np.sum((np.asarray(pred) - target) ** 2))
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")


def evaluate(network: Network, ds: Dataset) -> dict:
    """Accuracy for classifiers; R^2 against clean and noisy targets for regressors."""
    out = network.predict(ds.images)
    if network.spec.task == "classification":
        return {"accuracy": accuracy(out, ds.targets), "n": len(ds)}
    return {
        "r2": r_squared(out, ds.clean_targets),
        "r2_noisy": r_squared(out, ds.targets),
        "rmse": float(np.sqrt(np.mean((out - ds.clean_targets) ** 2))),
        "n": len(ds),
    }


def dataset_loss(network: Network, ds: Dataset, batch_size=64) -> float:
    """Mean training loss (cross-entropy or squared error) over a dataset."""
    total = 0.0
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        total += network.loss_value(ds.images[sl], ds.targets[sl]) * len(ds.targets[sl])
    return total / len(ds)


def score_key(task):
    return "accuracy" if task == "classification" else "r2"


# training -----------------------------------------------------------------------


def _fold_seed(seed, k):
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _batch_metric(task, outs, targets):
    outs = np.concatenate(outs)
    targets = np.concatenate(targets)
    if task == "classification":
        return "accuracy", accuracy(outs, targets)
    return "r2", r_squared(outs.reshape(-1), targets)


def train(spec: NetworkSpec, train_ds: Dataset, config: TrainConfig, seed: int,
          eval_ds: Dataset | None = None, fold: int = -1, on_epoch=None) -> tuple[Network, list[dict]]:
    """Train one network; returns it and per-epoch metric records.

    The per-epoch train metric is computed from the minibatch outputs seen
    during that epoch.  A non-finite loss raises PoisonedGradientError and a
    loss above ``DIVERGENCE_LOSS`` raises DivergenceError.  ``on_epoch`` is
    called with each record and the epoch's wall-clock seconds.
    """
    net = build_network(spec, seed)
    rng = np.random.default_rng(seed)
    state = ad.AdamState()
    n = len(train_ds)
    records = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses, norms, outs, seen = [], [], [], []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            where = f"fold {fold}, epoch {epoch}, batch {start // config.batch_size}"
            try:
                loss, grads, out, _ = net.loss_and_grad(train_ds.images[idx], train_ds.targets[idx])
            except PoisonedGradientError as exc:
                raise PoisonedGradientError(f"{exc} at {where}") from None
            if not math.isfinite(loss):
                raise PoisonedGradientError(f"loss became {loss} at {where}; gradient norm of the previous step "
                                            f"{norms[-1] if norms else float('nan'):.3e}")
            if loss > DIVERGENCE_LOSS:
                raise DivergenceError(f"loss {loss:.3e} exceeds {DIVERGENCE_LOSS:g} at {where}")
            norms.append(grads.global_norm())
            net.params = ad.sgd_adam_step(net.params, grads.clipped(config.clip), state, lr=config.lr)
            losses.append(loss * len(idx))
            outs.append(ad.softmax(out) if spec.task == "classification" else out)
            seen.append(train_ds.targets[idx])
        key, value = _batch_metric(spec.task, outs, seen)
        rec = {"fold": fold, "epoch": epoch, "split": "train", "loss": float(np.sum(losses) / n), key: value,
               "grad_norm_max": float(max(norms)), "n_params": net.n_params}
        if eval_ds is not None:
            rec["eval"] = evaluate(net, eval_ds)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec, time.perf_counter() - t0)
        log.info("fold %d epoch %d loss %.5f %s %.4f", fold, epoch, rec["loss"], key, value)
    return net, records


def fold_indices(n, k, seed) -> list[np.ndarray]:
    if k > n:
        raise ValidationError(f"{k} folds for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(p) for p in np.array_split(perm, k)]


def _run_fold(args):
    spec_d, ds, cfg_d, k, test_idx = args
    cfg = TrainConfig.from_dict(cfg_d)
    spec = NetworkSpec.from_dict(spec_d)
    mask = np.ones(len(ds), dtype=bool)
    mask[test_idx] = False
    timings = []
    t0 = time.perf_counter()
    net, records = train(spec, ds.subset(np.flatnonzero(mask)), cfg, _fold_seed(cfg.seed, k), fold=k,
                         on_epoch=lambda rec, sec: timings.append({"fold": k, "epoch": rec["epoch"], "seconds": sec}))
    test = ds.subset(test_idx)
    result = evaluate(net, test)
    result["loss"] = dataset_loss(net, test)
    result["fold"] = k
    timings.append({"fold": k, "total_seconds": time.perf_counter() - t0})
    return result, records, timings


def worker_count(config: TrainConfig) -> int:
    if config.single_thread:
        return 1
    env = os.environ.get("MVCNET_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, config.folds))


@dataclass
class CVResult:
    task: str
    folds: list[dict]
    metric: str
    mean: float
    std: float
    records: list[dict] = field(default_factory=list, repr=False)
    timings: list[dict] = field(default_factory=list, repr=False)
    mean_loss: float = float("nan")

    def summary(self) -> dict:
        return {"task": self.task, "metric": self.metric, "mean": self.mean, "std": self.std,
                "mean_test_loss": self.mean_loss, "folds": self.folds}


def cross_validate(ds: Dataset, config: TrainConfig) -> CVResult:
    """k-fold CV; fold results are identical whether run serially or in a pool."""
    config.validate()
    spec = NetworkSpec.from_dict(config.network)
    _check_compatible(spec, ds)
    splits = fold_indices(len(ds), config.folds, config.seed)
    jobs = [(spec.to_dict(), ds, config.to_dict(), k, idx) for k, idx in enumerate(splits)]
    workers = worker_count(config)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_fold, jobs))
    else:
        outs = [_run_fold(j) for j in jobs]
    key = score_key(spec.task)
    folds = [o[0] for o in outs]
    scores = np.array([f[key] for f in folds])
    records = [r for o in outs for r in o[1]]
    timings = [t for o in outs for t in o[2]]
    return CVResult(spec.task, folds, key, float(scores.mean()), float(scores.std()), records, timings,
                    float(np.mean([f["loss"] for f in folds])))


def _check_compatible(spec: NetworkSpec, ds: Dataset):
    m = spec.manifold_obj
    if m.n != ds.manifold.n:
        raise ValidationError(f"network expects SPD({m.n}) pixels, dataset has SPD({ds.manifold.n})")
    if tuple(spec.dims) != tuple(ds.dims) or spec.channels != ds.channels:
        raise ValidationError(f"network input {spec.dims}x{spec.channels} does not match dataset {ds.dims}x{ds.channels}")
    if (spec.task == "classification") != ds.is_classification:
        raise ValidationError(f"network task {spec.task!r} does not match dataset task {ds.spec.task!r}")
    if spec.task == "classification":
        classes = int(ds.targets.max()) + 1
        if spec.num_outputs < classes:
            raise ValidationError(f"network has {spec.num_outputs} outputs for {classes} classes")


def versions() -> dict:
    return {"mvcnet": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def run(config: TrainConfig, out_dir) -> dict:
    """Cross-validate, then fit on all samples and write the run directory."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(config)
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": versions(),
        "dataset_sha256": ds.checksum(),
        "dataset_samples": len(ds),
        "argv": sys.argv[1:],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    cv = cross_validate(ds, config)
    spec = NetworkSpec.from_dict(config.network)
    final_timing = []
    net, final_records = train(spec, ds, config, _fold_seed(config.seed, config.folds), fold=-1,
                               on_epoch=lambda rec, sec: final_timing.append({"fold": -1, "epoch": rec["epoch"], "seconds": sec}))
    _write_jsonl(out / "metrics.jsonl", cv.records + final_records)
    _write_jsonl(out / "timing.jsonl", cv.timings + final_timing)
    save_checkpoint(net, out / "model.ckpt", extra={"dataset_sha256": ds.checksum()})
    results = {"cv": cv.summary(), "final_train": evaluate(net, ds)}
    (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


__all__ = [
    "TrainConfig", "CVResult", "train", "cross_validate", "evaluate", "run", "preset_config",
    "accuracy", "r_squared", "fold_indices",
]
