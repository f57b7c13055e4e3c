"""``mvcnet`` command line: gen, train, eval, verify, grad-check.

Exit codes: 0 success, 1 validation error (including usage errors),
2 property failure, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path


from . import data as data_mod
from . import training
from .errors import MvcError, ValidationError
from .network import load_checkpoint

log = logging.getLogger("mvcnet")

EXIT_OK, EXIT_VALIDATION, EXIT_PROPERTY, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (exit 1); exit 2 is reserved for property failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _common(p, seed=True):
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--preset", metavar="NAME", help="named preset")
    if seed:
        p.add_argument("--seed", type=int, help="rng seed (overrides config/preset)")
    p.add_argument("--out", metavar="PATH", help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvcnet", description="Manifold-valued convolution networks on SPD images")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset (mvt-v1 file)")
    _common(p)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--classes", type=int)

    p = sub.add_parser("train", help="k-fold cross-validate, then fit and checkpoint a network")
    _common(p)
    p.add_argument("--data", metavar="PATH", help="mvt-v1 dataset (instead of generating one)")
    p.add_argument("--folds", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--single-thread", action="store_true", help="run folds sequentially (bit-exact)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--out", metavar="PATH", help="write the metrics record as JSON")

    p = sub.add_parser("verify", help="run the geometry and layer property suites")
    p.add_argument("--manifold", default="spd", choices=("spd", "sphere"))
    p.add_argument("--n", type=int, help="matrix size (spd, default 3) or sphere dimension (default 2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-fault", action="store_true", help="skew the isometry to show the suite catches it")
    p.add_argument("--no-grad", action="store_true", help="skip gradient checks")
    p.add_argument("--out", metavar="PATH", help="write the report as JSON")

    p = sub.add_parser("grad-check", help="reverse-mode vs finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=50, help="random coordinates per layer")
    p.add_argument("--out", metavar="PATH", help="write the report as JSON")
    return parser


# commands -----------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.config and args.preset:
        raise ValidationError("give either --config or --preset, not both")
    if args.config:
        spec = data_mod.DatasetSpec.from_dict(_read_json(args.config))
    else:
        spec = data_mod.preset(args.preset or "spd-class-small")
    for field, value in (("seed", args.seed), ("n_samples", args.n_samples), ("sigma", args.sigma),
                         ("classes", args.classes)):
        if value is not None:
            setattr(spec, field, value)
    ds = data_mod.generate(spec)
    out = Path(args.out or f"{args.preset or 'dataset'}.mvt")
    try:
        digest = data_mod.write_dataset(ds, out)
    except OSError as exc:
        raise ValidationError(f"cannot write {out}: {exc.strerror}") from None
    print(f"wrote {len(ds)} samples to {out}")
    print(f"sha256 {digest}")
    return EXIT_OK


def _train_config(args) -> training.TrainConfig:
    if args.config and args.preset:
        raise ValidationError("give either --config or --preset, not both")
    if args.config:
        cfg = training.TrainConfig.load(args.config)
    else:
        cfg = training.preset_config(args.preset or "spd-class-small")
    if args.data:
        if not Path(args.data).exists():
            raise ValidationError(f"dataset {args.data} does not exist")
        cfg.dataset, cfg.dataset_path = None, str(args.data)
    for field in ("seed", "folds", "lr", "epochs", "batch_size"):
        value = getattr(args, field)
        if value is not None:
            setattr(cfg, field, value)
    if args.seed is not None and cfg.dataset is not None:
        cfg.dataset = dict(cfg.dataset, seed=args.seed)
    if args.single_thread:
        cfg.single_thread = True
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out or "run")
    results = training.run(cfg, out)
    cv = results["cv"]
    for f in cv["folds"]:
        print(f"fold {f['fold']}: {cv['metric']} {f[cv['metric']]:.4f}")
    print(f"{len(cv['folds'])}-fold {cv['metric']}: {cv['mean']:.4f} +/- {cv['std']:.4f}")
    key = cv["metric"]
    print(f"final model train {key}: {results['final_train'][key]:.4f}")
    print(f"run written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    ds = data_mod.read_dataset(args.data)
    if len(ds) == 0:
        raise ValidationError(f"dataset {args.data} is empty")
    try:
        training._check_compatible(net.spec, ds)
    except ValidationError as exc:
        raise ValidationError(f"checkpoint and dataset disagree: {exc}") from None
    t0 = time.perf_counter()
    metrics = training.evaluate(net, ds)
    elapsed = time.perf_counter() - t0
    loss = training.dataset_loss(net, ds)
    record = {"split": "eval", "loss": loss, **metrics, "n_params": net.n_params,
              "seconds_per_sample": elapsed / len(ds)}
    print(f"loss {loss:.6f}")
    for k in ("accuracy", "r2", "r2_noisy", "rmse"):
        if k in metrics:
            print(f"{k} {metrics[k]:.6f}")
    print(f"time/sample {record['seconds_per_sample']:.6f} s")
    if args.out:
        Path(args.out).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _report_exit(report, out):
    for line in report.lines():
        print(line)
    if out:
        Path(out).write_text(json.dumps({"passed": report.passed, "warnings": report.warnings,
                                         "results": [r.to_dict() for r in report.results]}, indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_PROPERTY


def cmd_verify(args) -> int:
    from .verify import run_verify

    n = args.n if args.n is not None else (3 if args.manifold == "spd" else 2)
    report = run_verify(args.manifold, n, args.seed, args.trials, args.inject_fault, not args.no_grad)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return _report_exit(report, args.out)


def cmd_grad_check(args) -> int:
    from .verify import gradient_suite

    if args.coords < 1:
        raise ValidationError("--coords must be >= 1")
    return _report_exit(gradient_suite(args.seed, args.coords), args.out)


def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config {path} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path}: {exc}") from None


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except MvcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, KeyError) as exc:
        if args.command in ("gen", "train"):
            print(f"error: invalid configuration: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        raise


if __name__ == "__main__":
    sys.exit(main())
