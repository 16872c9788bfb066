"""Command line entry point: ``ndcr {gen,train,eval,gradcheck,inspect}``.

Exit codes: 0 success, 1 usage or configuration error, 2 malformed or
mismatched data files, 3 numeric failure (non-finite values, failed
gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import MAGIC as CKPT_MAGIC
from .checkpoint import decode_checkpoint, save_checkpoint
from .datagen import GenConfig, generate
from .dataset_io import MAGIC as DATA_MAGIC
from .dataset_io import decode_dataset, read_dataset, read_header, write_dataset
from .errors import ConfigError, DimensionError, FormatError, GradCheckError, NonFiniteError
from .gradcheck import MODULE_CHECKS, TOLERANCE, run_gradcheck
from .model import ABLATIONS
from .trainer import TrainConfig, evaluate, restore, train

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ndcr")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this CLI reserves 2 for data files."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _emit(obj, out=None) -> None:
    text = json.dumps(obj, sort_keys=True)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _write(path, writer) -> None:
    try:
        writer(path)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from None


def _read_data(path):
    try:
        return read_dataset(path)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc.strerror}") from None


# gen ------------------------------------------------------------------------

GEN_FLAGS = {"d": "d", "L": "L", "A": "A", "weights": "count_weights", "neg_prob": "neg_prob",
             "noise": "noise", "seed": "seed", "encoder_seed": "encoder_seed", "alignment": "alignment"}


def gen_config(args) -> GenConfig:
    values = _load_config(args.config)
    for flag, key in GEN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    weights = values.get("count_weights")
    if weights is not None and len(weights) != 5:
        raise ConfigError(f"proposition-count weights need exactly 5 entries (counts 1..5), got {len(weights)}")
    try:
        return GenConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_gen(args) -> int:
    cfg = gen_config(args)
    if args.count < 0:
        raise ConfigError("--count must be nonnegative")
    instances = generate(cfg, args.count)
    meta = {"generator": cfg.to_dict(), "config_hash": cfg.hash()}
    _write(args.out, lambda p: write_dataset(p, instances, meta, cfg.d, cfg.L))
    counts = np.bincount([inst.count for inst in instances], minlength=cfg.max_count + 1)[1:]
    _emit({"out": str(args.out), "instances": len(instances), "config_hash": cfg.hash(),
           "count_distribution": {str(k + 1): int(c) for k, c in enumerate(counts)}})
    return EXIT_OK


# train ----------------------------------------------------------------------

OPTIM_FLAGS = {"lr": "lr", "batch": "batch_size", "epochs": "epochs", "dropout": "dropout", "seed": "seed"}
MODEL_FLAGS = ("ablation", "init_seed", "fusion_scale", "uniformity_margin", "negation_margin", "heads",
               "interaction", "subtract")


def train_config(args, d: int) -> TrainConfig:
    values = _load_config(args.config)
    optim = dict(values.get("optim", {}))
    model = dict(values.get("model", {}))
    for flag, key in OPTIM_FLAGS.items():
        if getattr(args, flag) is not None:
            optim[key] = getattr(args, flag)
    for flag in MODEL_FLAGS:
        if getattr(args, flag) is not None:
            model[flag] = getattr(args, flag)
    model.setdefault("d", d)
    try:
        return TrainConfig.from_dict({**values, "optim": optim, "model": model})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    train_set, train_head = _read_data(args.data)
    val_set, val_head = _read_data(args.val)
    if (train_head["d"], train_head["L"]) != (val_head["d"], val_head["L"]):
        raise DimensionError(f"training data has d={train_head['d']}, L={train_head['L']} but validation data has "
                             f"d={val_head['d']}, L={val_head['L']}")
    cfg = train_config(args, train_head["d"])
    if cfg.model.d != train_head["d"]:
        raise DimensionError(f"configured width d={cfg.model.d} does not match the data width d={train_head['d']}")
    chash = cfg.hash()
    provenance = {"config_hash": chash, "train_data": train_head["config"].get("config_hash"),
                  "val_data": val_head["config"].get("config_hash")}
    _emit({"event": "config", **provenance, "config": cfg.to_dict()})
    metrics = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")
    try:
        sink = metrics.open("w")
    except OSError as exc:
        raise ConfigError(f"cannot write {metrics}: {exc.strerror}") from None

    def on_epoch(entry):
        line = json.dumps({**entry, "config_hash": chash}, sort_keys=True)
        sink.write(line + "\n")
        sink.flush()
        if not args.quiet:
            print(line, flush=True)

    with sink:
        result = train(train_set, val_set, cfg, callback=on_epoch)
    meta = {**provenance, "config": cfg.to_dict(), "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_accuracy}
    _write(args.out, lambda p: save_checkpoint(p, result.store.state_dict(), meta))
    _emit({"event": "done", "checkpoint": str(args.out), "metrics": str(metrics), "best_epoch": result.best_epoch,
           "best_val_accuracy": result.best_accuracy, "config_hash": chash})
    return EXIT_OK


# eval -----------------------------------------------------------------------

def _load_model(path):
    try:
        state, meta = decode_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if "config" not in meta:
        raise FormatError(f"checkpoint {path} carries no model settings in its metadata")
    cfg = TrainConfig.from_dict(meta["config"])
    return restore(state, cfg.model.to_dict()), cfg, meta


def cmd_eval(args) -> int:
    store, cfg, meta = _load_model(args.checkpoint)
    data, head = _read_data(args.data)
    if head["d"] != cfg.model.d:
        raise DimensionError(f"dataset has d={head['d']} but the checkpoint was trained with d={cfg.model.d}")
    report = evaluate(data, store, cfg.model, ablation=args.ablation, batch_size=args.batch,
                      use_gold_counts=args.gold_counts)
    out = {**report.to_dict(), "config_hash": meta.get("config_hash"),
           "data_config_hash": head["config"].get("config_hash")}
    if not args.quiet:
        print(report.table(), file=sys.stderr)
    _emit(out, args.out)
    return EXIT_OK


# gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    modules = args.modules or list(MODULE_CHECKS)
    unknown = [m for m in modules if m not in MODULE_CHECKS]
    if unknown:
        raise ConfigError(f"unknown module(s) {unknown}; choose from {sorted(MODULE_CHECKS)}")
    seeds = range(args.seed, args.seed + args.seeds)
    results = run_gradcheck(modules, seeds)
    rows = []
    for r in results:
        row = {"module": r.module, "seed": r.seed, "max_error": r.max_error, "worst": r.worst,
               "checked": r.checked, "skipped": list(r.skipped), "seconds": round(r.seconds, 3),
               "passed": r.passed}
        rows.append(row)
        print(json.dumps(row, sort_keys=True))
    failed = sorted({r.module for r in results if not r.passed})
    summary = {"tolerance": TOLERANCE, "seeds": list(seeds), "failed": failed, "passed": not failed}
    _emit(summary)
    if args.out:
        Path(args.out).write_text(json.dumps({"results": rows, **summary}, sort_keys=True) + "\n")
    if failed:
        raise GradCheckError(f"gradient check failed for {failed}")
    return EXIT_OK


# inspect --------------------------------------------------------------------

def cmd_inspect(args) -> int:
    path = Path(args.path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    magic = buf[:4]
    if magic == CKPT_MAGIC:
        state, meta = decode_checkpoint(buf)
        print(f"checkpoint {path}: {len(state)} tensors, {sum(a.size for a in state.values())} parameters")
        for k in ("config_hash", "train_data", "val_data", "best_epoch", "best_val_accuracy"):
            if k in meta:
                print(f"  {k}: {meta[k]}")
        for name, arr in state.items():
            digest = hashlib.sha256(arr.astype("<f4").tobytes()).hexdigest()[:12]
            print(f"  {name:40s} {str(list(arr.shape)):16s} {digest}")
    elif magic == DATA_MAGIC:
        head = read_header(path)
        instances, _ = decode_dataset(buf)
        counts = np.bincount([inst.count for inst in instances] or [0])
        print(f"dataset {path}: version {head['version']}, d={head['d']}, L={head['L']}, {head['count']} instances")
        print(f"  config_hash: {head['config'].get('config_hash')}")
        print(f"  sha256: {hashlib.sha256(buf).hexdigest()[:16]}")
        print(f"  count distribution: {dict((str(k), int(c)) for k, c in enumerate(counts) if k and c)}")
        for key, value in sorted(head["config"].get("generator", {}).items()):
            print(f"  {key}: {value}")
    else:
        raise FormatError(f"{path}: unrecognized magic {magic!r}", 0)
    return EXIT_OK


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ndcr", description="Divide-and-conquer image retrieval head and synthetic benchmark.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file with generator settings; flags override it")
    g.add_argument("--d", type=int)
    g.add_argument("--L", type=int)
    g.add_argument("--A", type=int)
    g.add_argument("--weights", type=float, nargs="+", help="relative frequency of 1..5 propositions")
    g.add_argument("--neg-prob", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--encoder-seed", type=int)
    g.add_argument("--alignment", type=float)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write the best checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="JSON-lines metrics path (default: <out>.metrics.jsonl)")
    t.add_argument("--config", help="JSON file with optim/model/loss_weights sections; flags override it")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--init-seed", type=int)
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--heads", type=int)
    t.add_argument("--fusion-scale", type=float)
    t.add_argument("--uniformity-margin", type=float)
    t.add_argument("--negation-margin", type=float)
    t.add_argument("--interaction", choices=("flat", "per_prop"))
    t.add_argument("--subtract", choices=("replace", "augment"))
    t.add_argument("-q", "--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="report path (JSON)")
    e.add_argument("--ablation", choices=ABLATIONS)
    e.add_argument("--batch", type=int, default=250)
    e.add_argument("--gold-counts", action="store_true", help="use true proposition counts instead of predicted")
    e.add_argument("-q", "--quiet", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks per module")
    c.add_argument("--modules", nargs="+", metavar="MODULE")
    c.add_argument("--seeds", type=int, default=5, help="number of seeds")
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--out", help="detailed results path (JSON)")
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="describe a checkpoint or dataset file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ndcr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DimensionError) as exc:
        print(f"ndcr: data error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NonFiniteError, GradCheckError) as exc:
        print(f"ndcr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
