"""Command-line entry point: ``dat <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, build_config, parse_value, read_config_file, write_config_file
from .data import Dataset, load_idx_pair, synthetic_shapes, write_idx
from .metrics import MetricsRecord, append_jsonl, to_csv

log = logging.getLogger("dat")

COMMANDS = ("train-discretizer", "train-classifier", "evaluate", "analyze", "attack", "gen-data")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dat", description="Discrete adversarial training experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value file supplying defaults")
        p.add_argument("--out", default="runs", help="root directory for run directories")
        p.add_argument("--force", action="store_true", help="reuse an existing run directory")
        for f in fields(ExperimentConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.type == "bool":
                p.add_argument(flag, dest=f.name, action="store_const", const="true", default=None)
            else:
                p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    return parser


def load_dataset(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.data == "idx":
        train = load_idx_pair(config.train_images, config.train_labels)
        test = load_idx_pair(config.test_images, config.test_labels)
    else:
        train = synthetic_shapes(config.n_train, config.data_seed, config.num_classes, split="train")
        test = synthetic_shapes(config.n_test, config.data_seed, config.num_classes, split="test")
    return train, test


def _prepare_run(config: ExperimentConfig, out: str, force: bool, command: str) -> Path:
    run = config.run_dir(out)
    if run.exists() and not force:
        raise ConfigError(f"run directory {run} already exists; pass --force to reuse it")
    run.mkdir(parents=True, exist_ok=True)
    # a forced rerun starts a fresh metrics log instead of appending to the old one
    (run / "metrics.jsonl").unlink(missing_ok=True)
    write_config_file(run / "config.txt", config)
    (run / "command.txt").write_text(command + "\n", encoding="utf-8")
    return run


def _metrics_writer(run: Path, config: ExperimentConfig):
    started = time.time()

    def write(step: int, metrics: dict) -> None:
        append_jsonl(run / "metrics.jsonl", MetricsRecord.create(config.name, config.config_hash(), step,
                                                                 metrics, started))
    return write


def _load_discretizer(path: str):
    from .discretizer import Discretizer

    if not path:
        raise ConfigError("a --discretizer checkpoint is required")
    return Discretizer.from_state(load_checkpoint(path))


def _load_classifier(path: str):
    from .classifier import Classifier

    if not path:
        raise ConfigError("a --classifier checkpoint is required")
    return Classifier.from_state(load_checkpoint(path))


def _corruption_list(config: ExperimentConfig):
    from .evaluation import CORRUPTION_KINDS, CorruptionSpec

    if config.corruptions == "none":
        return []
    kinds = CORRUPTION_KINDS if config.corruptions == "all" else tuple(
        k.strip() for k in config.corruptions.split(",") if k.strip())
    return [CorruptionSpec(k, s, config.seed) for k in kinds for s in range(1, 6)]


def _attack_list(config: ExperimentConfig) -> tuple:
    if not config.attacks.strip():
        return ()
    return tuple(float(parse_value("epsilon", e)) / 255 for e in config.attacks.split(","))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(config, run):
    train, test = load_dataset(config)
    for split, ds in (("train", train), ("test", test)):
        write_idx(run / f"{split}-images.idx", np.rint(ds.images * 255))
        write_idx(run / f"{split}-labels.idx", ds.labels)
    return {"n_train": len(train), "n_test": len(test)}


def cmd_train_discretizer(config, run):
    from .discretizer import codebook_usage, reconstruction_mse, train_discretizer

    train, test = load_dataset(config)
    model = train_discretizer(train.images, config.discretizer_config(train.images.shape[1]), test.images,
                              log_metrics=_metrics_writer(run, config))
    save_checkpoint(run / "discretizer.ckpt", model.state_dict())
    usage = codebook_usage(model, test.images)
    return {"heldout_mse": reconstruction_mse(model, test.images), "heldout_usage": float(np.mean(usage > 0))}


def cmd_train_classifier(config, run):
    from .trainer import train

    disc = _load_discretizer(config.discretizer) if config.mode in ("dat", "random_word") else None
    train_set, test_set = load_dataset(config)
    result = train(config.train_config(), train_set, test_set, disc, log_metrics=_metrics_writer(run, config))
    save_checkpoint(run / "classifier.ckpt", result.model.state_dict())
    return result.history[-1] if result.history else {}


def cmd_evaluate(config, run):
    from .evaluation import EvalOptions, evaluate

    model = _load_classifier(config.classifier)
    disc = _load_discretizer(config.discretizer) if config.with_discretizer else None
    baseline = None
    if config.baseline:
        baseline = MetricsRecord.from_json(Path(config.baseline).read_text(encoding="utf-8"))
    _, test = load_dataset(config)
    opts = EvalOptions(config.with_discretizer, disc, _attack_list(config), _corruption_list(config),
                       baseline, config.baseline)
    record = evaluate(model, test, opts, config.name, config.config_hash())
    (run / "evaluation.json").write_text(record.to_json() + "\n", encoding="utf-8")
    (run / "evaluation.csv").write_text(to_csv([record]), encoding="utf-8")
    return record.metrics


def cmd_analyze(config, run):
    from .analysis import bn_pcc_histogram, realism_report, straight_through_alignment

    model = _load_classifier(config.classifier)
    disc = _load_discretizer(config.discretizer)
    _, test = load_dataset(config)
    hists = bn_pcc_histogram(model, disc, test.images, test.labels, n_batches=config.n_batches,
                             batch_size=config.analysis_batch_size, seed=config.seed, alpha=config.alpha,
                             epsilon=config.epsilon, steps=max(config.steps, 1))
    out = {}
    for regime, h in hists.items():
        (run / f"pcc_{regime}.csv").write_text(h.to_csv(), encoding="utf-8")
        out[f"pcc_mean_median/{regime}"] = h.mean_median
        out[f"pcc_var_median/{regime}"] = h.var_median
    n = min(100, len(test))
    rep = realism_report(model, disc, test.images[:n], test.labels[:n], config.alpha, config.epsilon)
    out.update({"color_delta/dat": rep.dat_color_delta, "color_delta/fgsm": rep.fgsm_color_delta,
                "high_freq_share/dat": float(np.mean(rep.dat_high_share)),
                "high_freq_share/fgsm": float(np.mean(rep.fgsm_high_share))})
    align = straight_through_alignment(model, disc, test.images, test.labels, min(config.n_batches, 50),
                                       config.analysis_batch_size, config.alpha, config.seed)
    out["alignment_mean"] = float(np.mean(align))
    return out


def cmd_attack(config, run):
    from .evaluation import fgsm_attack
    from .trainer import PerturbationSpec, discrete_adversarial_example

    model = _load_classifier(config.classifier)
    _, test = load_dataset(config)
    x, y = test.images, test.labels
    tensors, out = {}, {}
    for eps in _attack_list(config):
        adv = np.concatenate([fgsm_attack(model, x[i:i + 500], y[i:i + 500], eps) for i in range(0, len(x), 500)])
        tensors[f"fgsm/{eps * 255:g}"] = adv
        out[f"fgsm_acc/{eps * 255:g}"] = float(np.mean(model.predict(adv) == y))
    if config.discretizer:
        disc = _load_discretizer(config.discretizer)
        spec = PerturbationSpec(config.alpha, config.perturbation)
        parts, fracs = [], []
        for i in range(0, len(x), 250):
            ex = discrete_adversarial_example(model, disc, x[i:i + 250], y[i:i + 250], spec)
            parts.append(ex.x_adv)
            fracs.append(ex.modified_fraction * len(ex.x_adv))
        tensors["dat"] = np.concatenate(parts)
        out["dat_acc"] = float(np.mean(model.predict(tensors["dat"]) == y))
        out["modified_fraction"] = float(np.sum(fracs) / len(x))
    save_checkpoint(run / "adversarial.ckpt", tensors)
    return out


HANDLERS = {
    "gen-data": cmd_gen_data, "train-discretizer": cmd_train_discretizer,
    "train-classifier": cmd_train_classifier, "evaluate": cmd_evaluate, "analyze": cmd_analyze,
    "attack": cmd_attack,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        overrides = {f.name: parse_value(f.name, getattr(args, f.name))
                     for f in fields(ExperimentConfig) if getattr(args, f.name) is not None}
        config = build_config(file_values, overrides)
        run = _prepare_run(config, args.out, args.force, " ".join([args.command] + argv[1:]))
    except (ConfigError, OSError) as exc:
        print(f"dat: config error: {exc}", file=sys.stderr)
        return 2
    try:
        summary = HANDLERS[args.command](config, run)
    except ConfigError as exc:
        print(f"dat: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit 1
        log.exception("run failed")
        print(f"dat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    summary_record = MetricsRecord.create(config.name, config.config_hash(), -1, summary)
    (run / "summary.json").write_text(summary_record.to_json() + "\n", encoding="utf-8")
    print(json.dumps({"run_dir": str(run), **summary_record.metrics}, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
