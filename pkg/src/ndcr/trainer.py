"""Training loop, evaluation and the per-count accuracy report."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import EVAL, Mode
from .model import (
    ABLATIONS,
    _GROUPS,
    ModelConfig,
    build_params,
    collate,
    final_scores,
    forward,
    objective,
    param_group,
)
from .optim import OptimizerConfig, ParamStore, adam_step, learning_rate
from .propositions import predict_count
from .system2 import kl_divergence
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: dict = field(default_factory=lambda: {"match": 1.0, "neg": 1.0, "uniform": 1.0, "count": 1.0})
    eval_batch: int = 250

    def to_dict(self) -> dict:
        return {"optim": asdict(self.optim), "model": self.model.to_dict(), "loss_weights": dict(self.loss_weights),
                "eval_batch": self.eval_batch}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        extra = set(data) - {"optim", "model", "loss_weights", "eval_batch"}
        if extra:
            raise ConfigError(f"unknown training option(s): {sorted(extra)}")
        optim = data.get("optim", {})
        bad = set(optim) - set(OptimizerConfig.__dataclass_fields__)
        bad |= set(data.get("model", {})) - set(ModelConfig.__dataclass_fields__)
        weights = dict(data.get("loss_weights", {}))
        bad |= set(weights) - {"match", "neg", "uniform", "count"}
        if bad:
            raise ConfigError(f"unknown option(s): {sorted(bad)}")
        return cls(
            optim=OptimizerConfig(**optim),
            model=ModelConfig.from_dict(data.get("model", {})),
            loss_weights={"match": 1.0, "neg": 1.0, "uniform": 1.0, "count": 1.0, **weights},
            eval_batch=int(data.get("eval_batch", 250)),
        )

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    ablation: str
    total: int
    accuracy: float
    bucket_total: dict  # true proposition count -> instances
    bucket_correct: dict  # true proposition count -> correctly retrieved
    ablation_accuracy: dict  # every ablation the parameters support
    count_accuracy: float
    count_confusion: list  # [true count - 1][predicted count - 1]
    mean_neg_loss: float | None = None
    mean_hinged_kl: float | None = None

    @property
    def bucket_accuracy(self) -> dict:
        return {k: self.bucket_correct[k] / n if n else 0.0 for k, n in self.bucket_total.items()}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bucket_total"] = {str(k): v for k, v in self.bucket_total.items()}
        out["bucket_correct"] = {str(k): v for k, v in self.bucket_correct.items()}
        return out

    def table(self, buckets=range(1, 6)) -> str:
        """Per-count counts of correctly retrieved instances, laid out like a results table."""
        keys = list(buckets)
        head = ["Nums_of_props"] + [str(k) for k in keys]
        rows = [
            ["Total Number"] + [str(self.bucket_total.get(k, 0)) for k in keys],
            [self.ablation] + [str(self.bucket_correct.get(k, 0)) for k in keys],
        ]
        width = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, width))  # noqa: E731
        return "\n".join(fmt(r) for r in [head] + rows)


@dataclass
class TrainResult:
    store: ParamStore
    history: list
    best_epoch: int
    best_accuracy: float


def supported_ablations(store: ParamStore) -> list[str]:
    have = {param_group(n) for n in store.names()}
    return [a for a in ABLATIONS if _GROUPS[a] <= have]


def _carrier(ablation: str, modes: list) -> str:
    """The widest supported ablation whose forward pass also yields ``ablation``'s scores."""
    g = _GROUPS[ablation]

    def same_path(b):
        h = _GROUPS[b]
        if ("s1.ctx" in h) != ("s1.ctx" in g) or not g <= h:
            return False
        return "s2" not in g or ("s2.neg" in h) == ("s2.neg" in g)

    return max((b for b in modes if same_path(b)), key=lambda b: len(_GROUPS[b]))


def restore(state, model: dict) -> ParamStore:
    """Parameter store for a saved ``state`` built under model settings ``model``."""
    store = build_params(ModelConfig.from_dict(model))
    try:
        store.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not match its recorded model settings: {exc}") from None
    return store


def predicted_counts(store: ParamStore, batch) -> np.ndarray:
    with no_grad():
        logits = predict_count(store, Tensor(batch.text[:, 0, :].astype(store.dtype)))
    return logits.data.argmax(axis=-1) + 1


def _batches(instances, size):
    for i in range(0, len(instances), size):
        yield instances[i:i + size]


def evaluate(instances, store: ParamStore, cfg: ModelConfig, ablation: str | None = None,
             batch_size: int = 250, use_gold_counts: bool = False) -> EvalReport:
    """Accuracy of ``store`` on ``instances`` under ``ablation`` (default: the model's own)."""
    instances = list(instances)
    if not instances:
        raise ValueError("cannot evaluate an empty dataset")
    ablation = ablation or cfg.ablation
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}")
    d = store["prop.seed"].shape[1]
    if instances[0].d != d:
        raise DimensionError(f"dataset has d={instances[0].d} but the checkpoint has d={d}")
    K = store["prop.seed"].shape[0]
    modes = supported_ablations(store)
    if ablation not in modes:
        raise ConfigError(f"checkpoint cannot be evaluated as {ablation!r}; supports {modes}")

    gold, true_counts, pred_counts = [], [], []
    correct = {a: [] for a in modes}
    neg_loss, hinged = [], []
    for chunk in _batches(instances, batch_size):
        batch = collate(chunk, store.dtype)
        counts = predicted_counts(store, batch)
        pred_counts.append(counts)
        gold.append(batch.gold)
        true_counts.append(batch.count)
        use = batch.count if use_gold_counts else counts
        with no_grad():
            cache = {}
            for a in modes:
                key = _carrier(a, modes)
                if key not in cache:
                    cache[key] = forward(store, batch, cfg, EVAL, counts=use, ablation=key)
                correct[a].append(final_scores(cache[key], a).argmax(axis=-1) == batch.gold)
            base = cache[_carrier(modes[0], modes)]
            if base.get("neg_scores") is not None:
                kl = kl_divergence(base["neg_scores"].data, base["s1_scores"].data)
                h = np.maximum(cfg.negation_margin - kl, 0.0) * base["prop_mask"]
                neg_loss.append(h.sum(axis=-1))
                hinged.append(h.sum(axis=-1) / base["prop_mask"].sum(axis=-1))

    gold = np.concatenate(gold)
    true_counts = np.concatenate(true_counts)
    pred_counts = np.concatenate(pred_counts)
    hits = {a: np.concatenate(v) for a, v in correct.items()}
    mine = hits[ablation]
    buckets = sorted(set(range(1, 6)) | set(int(c) for c in true_counts))
    confusion = np.zeros((K, K), dtype=int)
    for t, p in zip(true_counts, pred_counts):
        confusion[min(t, K) - 1, p - 1] += 1
    return EvalReport(
        ablation=ablation,
        total=len(gold),
        accuracy=float(mine.mean()),
        bucket_total={k: int((true_counts == k).sum()) for k in buckets},
        bucket_correct={k: int(mine[true_counts == k].sum()) for k in buckets},
        ablation_accuracy={a: float(v.mean()) for a, v in hits.items()},
        count_accuracy=float((pred_counts == true_counts).mean()),
        count_confusion=confusion.tolist(),
        mean_neg_loss=float(np.concatenate(neg_loss).mean()) if neg_loss else None,
        mean_hinged_kl=float(np.concatenate(hinged).mean()) if hinged else None,
    )


def train(train_set, val_set, cfg: TrainConfig | None = None, callback=None) -> TrainResult:
    """Optimize a fresh model; keeps the parameters with the best validation accuracy.

    ``history[0]`` describes the untrained model; entry ``e`` the state after
    ``e`` epochs. ``callback(entry)`` is invoked after each entry is recorded.
    """
    cfg = cfg or TrainConfig()
    train_set, val_set = list(train_set), list(val_set)
    if not train_set:
        raise ValueError("training set is empty")
    if not val_set:
        raise ValueError("validation set is empty")
    opt, mcfg = cfg.optim, cfg.model
    if train_set[0].d != mcfg.d:
        raise DimensionError(f"data has d={train_set[0].d} but the model is configured with d={mcfg.d}")
    store = build_params(mcfg)
    rng = np.random.default_rng(opt.seed)
    mode = Mode(training=True, dropout=opt.dropout, rng=rng)

    def record(epoch, lr, sums, n_batches, seconds):
        rep = evaluate(val_set, store, mcfg, batch_size=cfg.eval_batch)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "losses": {k: v / max(n_batches, 1) for k, v in sums.items()},
            "val_accuracy": rep.accuracy,
            "val_count_accuracy": rep.count_accuracy,
            "val_hinged_kl": rep.mean_hinged_kl,
            "seconds": seconds,
        }
        history.append(entry)
        if callback:
            callback(entry)
        return rep.accuracy

    history: list = []
    best_acc = record(0, 0.0, {}, 0, 0.0)
    best_state, best_epoch = store.state_dict(), 0
    step = 0
    order = np.arange(len(train_set))
    for epoch in range(opt.epochs):
        t0 = time.perf_counter()
        lr = learning_rate(opt, epoch)
        rng.shuffle(order)
        sums: dict = {}
        n_batches = 0
        for start in range(0, len(order), opt.batch_size):
            batch = collate([train_set[i] for i in order[start:start + opt.batch_size]], store.dtype)
            store.zero_grad()
            out = forward(store, batch, mcfg, mode)
            loss, terms = objective(out, batch, mcfg, cfg.loss_weights)
            loss.backward()
            step += 1
            adam_step(store, store.grads(), step, opt, epoch)
            terms["total"] = float(loss.data)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        acc = record(epoch + 1, lr, sums, n_batches, time.perf_counter() - t0)
        log.info("epoch %d loss %.4f val acc %.4f", epoch + 1, sums["total"] / n_batches, acc)
        if acc > best_acc:
            best_acc, best_state, best_epoch = acc, store.state_dict(), epoch + 1
    store.load_state_dict(best_state)
    return TrainResult(store=store, history=history, best_epoch=best_epoch, best_accuracy=best_acc)
