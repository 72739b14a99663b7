"""Command-line surface: train / prune / eval / ablation / rate-sweep /
check-grad / report."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import gradcheck, metrics, network, pruner
from .data import DataError, Dataset, load_cifar10, synth_dataset
from .losses import LossWeights
from .network import Network, load, reference_specs, save
from .pruner import PruneConfig, prune_model, train_baseline


@dataclass
class ExperimentConfig:
    """Flat experiment settings, loadable from a key=value file."""
    arch: str = "reference"
    data: str = "synth"
    data_dir: str = ""
    classes: int = 3
    per_class: int = 100
    image_size: int = 12
    data_seed: int = 0
    train_cap: int = 0
    test_cap: int = 0
    out: str = "out"
    seed: int = 0
    prune: PruneConfig = field(default_factory=lambda: PruneConfig(rate=0.3))

    @classmethod
    def from_file(cls, path: str) -> dict:
        """Parse a flat key=value file into an override dict (strings)."""
        if not os.path.exists(path):
            raise DataError(f"config file {path} does not exist")
        overrides = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                overrides[key] = value
        return overrides


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default="synth", choices=["synth", "cifar"],
                   help="dataset source")
    p.add_argument("--data-dir", default="", help="directory with CIFAR-10 binaries")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--image-size", type=int, default=12)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--train-cap", type=int, default=0,
                   help="cap on CIFAR train examples (0 = all)")
    p.add_argument("--test-cap", type=int, default=0)


def _load_dataset(args) -> Dataset:
    if args.data == "cifar":
        if not args.data_dir:
            raise DataError("--data cifar requires --data-dir")
        return load_cifar10(args.data_dir,
                            train_cap=args.train_cap or None,
                            test_cap=args.test_cap or None)
    return synth_dataset(args.classes, args.per_class, image_size=args.image_size,
                         seed=args.data_seed)


def _add_prune_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rate", type=float, default=0.3)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--losses", default="r,s,c",
                   help="comma-separated subset of r,s,c")
    p.add_argument("--selection-batches", type=int, default=10)
    p.add_argument("--refit-epochs", type=int, default=20)
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)


def _parse_losses(text: str) -> frozenset:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("--losses must enable at least one of r,s,c")
    bad = set(parts) - {"r", "s", "c"}
    if bad:
        raise ValueError(f"--losses: unknown loss flags {sorted(bad)}")
    return frozenset(parts)


def _prune_config(args) -> PruneConfig:
    return PruneConfig(
        rate=args.rate,
        weights=LossWeights(args.alpha, args.beta),
        eta=args.eta,
        selection_batches=args.selection_batches,
        refit_epochs=args.refit_epochs,
        finetune_epochs=args.finetune_epochs,
        enabled_losses=_parse_losses(args.losses),
        seed=args.seed,
        batch_size=args.batch_size,
    )


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    dataset = _load_dataset(args)
    rng = np.random.default_rng(args.seed)
    c, h, w = dataset.image_shape
    if h != w:
        raise DataError("reference architecture expects square images")
    net = Network.initialize(reference_specs(c, h, dataset.num_classes),
                             dataset.image_shape, dataset.num_classes, rng)
    log = train_baseline(net, dataset, args.epochs, eta=args.eta,
                         batch_size=args.batch_size, seed=args.seed)
    save(net, args.model)
    final = log[-1] if log else {"train_error": float("nan"), "test_error": float("nan")}
    print(f"trained {args.epochs} epochs: train_err={final['train_error']:.4f} "
          f"test_err={final['test_error']:.4f} -> {args.model}")
    return 0


def cmd_prune(args) -> int:
    dataset = _load_dataset(args)
    net = load(args.model)
    cfg = _prune_config(args)
    os.makedirs(args.out, exist_ok=True)
    final, report = prune_model(net, cfg, dataset)
    save(final, os.path.join(args.out, "pruned.prnk"))
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    report.write_loss_curves(args.out)
    print(f"pruned rate={cfg.rate}: baseline_test={report.baseline_test_error:.4f} "
          f"masked_test={report.masked_test_error:.4f} "
          f"final_test={report.final_test_error:.4f} "
          f"params {report.stats.param_ratio:.2f}x flops {report.stats.flops_ratio:.2f}x")
    return 0


def cmd_eval(args) -> int:
    dataset = _load_dataset(args)
    net = load(args.model)
    err = metrics.evaluate(net, dataset, split=args.split)
    print(f"{args.split}_error={err:.4f}")
    return 0


def cmd_ablation(args) -> int:
    dataset = _load_dataset(args)
    net = load(args.model)
    base_cfg = _prune_config(args)
    os.makedirs(args.out, exist_ok=True)

    per_seed: dict[str, list[dict]] = {}
    for seed in range(args.seeds):
        rows = metrics.run_ablation(net, dataset, replace(base_cfg, seed=seed))
        for row in rows:
            per_seed.setdefault(row["losses"], []).append(row)

    summary = []
    for label, rows in per_seed.items():
        summary.append({
            "losses": label,
            "train_error": float(np.mean([r["train_error"] for r in rows])),
            "test_error": float(np.mean([r["test_error"] for r in rows])),
        })
    _write_csv(os.path.join(args.out, "ablation.csv"),
               ["losses", "train_error", "test_error"],
               [[r["losses"], repr(r["train_error"]), repr(r["test_error"])]
                for r in summary])
    text = metrics.format_table(summary, ["losses", "train_error", "test_error"])
    with open(os.path.join(args.out, "ablation.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


def cmd_rate_sweep(args) -> int:
    dataset = _load_dataset(args)
    net = load(args.model)
    base_cfg = _prune_config(args)
    rates = [float(r) for r in args.rates.split(",")]
    os.makedirs(args.out, exist_ok=True)

    summary = []
    for rate in rates:
        errs = []
        for seed in range(args.seeds):
            cfg = replace(base_cfg, rate=rate, seed=seed)
            _, report = prune_model(net, cfg, dataset)
            errs.append(report.masked_test_error)
        summary.append({"rate": rate, "test_error": float(np.mean(errs))})
    _write_csv(os.path.join(args.out, "rate_sweep.csv"),
               ["rate", "test_error"],
               [[r["rate"], repr(r["test_error"])] for r in summary])
    text = metrics.format_table(summary, ["rate", "test_error"])
    with open(os.path.join(args.out, "rate_sweep.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


def cmd_check_grad(args) -> int:
    results = gradcheck.run_suite(n_seeds=args.seeds)
    failed = False
    for name, worst, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name:<24} max_rel_err={worst:.3e}")
        failed |= not ok
    return 1 if failed else 0


def cmd_report(args) -> int:
    import json
    with open(args.report) as fh:
        doc = json.load(fh)
    errors = doc["errors"]
    comp = doc["compression"]
    print("configuration:", doc["config"])
    rows = [{"stage": stage, "train_error": errors[stage]["train"],
             "test_error": errors[stage]["test"]}
            for stage in ("baseline", "masked", "final")]
    print(metrics.format_table(rows, ["stage", "train_error", "test_error"]))
    print(f"params: {comp['params_before']} -> {comp['params_after']} "
          f"({comp['param_ratio']:.2f}x)")
    print(f"flops:  {comp['flops_before']} -> {comp['flops_after']} "
          f"({comp['flops_ratio']:.2f}x)")
    for layer, entry in sorted(doc["layers"].items(), key=lambda kv: int(kv[0])):
        print(f"layer {layer}: kept {len(entry['retained'])}/{len(entry['sensitivities'])} "
              f"channels {entry['retained']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunekit",
                                     description="multi-loss channel pruning toolkit")
    parser.add_argument("--config", default="",
                        help="key=value file supplying flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a baseline model")
    _add_data_args(p)
    p.add_argument("--model", required=True, help="output model path")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("prune", help="prune a trained model")
    _add_data_args(p)
    _add_prune_args(p)
    p.add_argument("--model", required=True, help="baseline model path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("eval", help="evaluate a model on one split")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablation", help="7-row loss-combination sweep")
    _add_data_args(p)
    _add_prune_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(fn=cmd_ablation)

    p = sub.add_parser("rate-sweep", help="pruning-rate sweep")
    _add_data_args(p)
    _add_prune_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rates", default="0.3,0.5,0.7")
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(fn=cmd_rate_sweep)

    p = sub.add_parser("check-grad", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(fn=cmd_check_grad)

    p = sub.add_parser("report", help="print a pruning report")
    p.add_argument("--report", required=True, help="path to report.json")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # a config file supplies defaults; explicit flags win
    if "--config" in argv:
        at = argv.index("--config")
        overrides = ExperimentConfig.from_file(argv[at + 1])
        extra = []
        for key, value in overrides.items():
            flag = "--" + key.replace("_", "-")
            if flag not in argv:
                extra += [flag, value]
        argv = argv[:at] + argv[at + 2:] + extra
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
