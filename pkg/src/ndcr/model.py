"""Full NDCR head: parameters, batching, forward pass and training objective."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .combiner import combine, init_combiner, pool
from .errors import ConfigError, DimensionError
from .layers import EVAL, Mode
from .optim import ParamStore
from .propositions import SUBTRACT_MODES, init_propositions, parse_propositions, predict_count, uniformity_loss
from .system1 import INTERACTIONS, contextual_interact, fuse, init_system1, modify, score
from .system2 import conjunction, init_system2, joint_representation, negate, negation_feedback_loss
from .tensor import Tensor

ABLATIONS = ("full", "system1-meanpool", "system2-only", "no-negation", "no-modifier")

# parameter groups each training-time ablation owns
_GROUPS = {
    "full": {"prop", "s1", "s1.ctx", "s2", "s2.neg", "comb"},
    "system1-meanpool": {"prop", "s1", "s1.ctx"},
    "no-modifier": {"prop", "s1"},
    "system2-only": {"prop", "s1", "s1.ctx", "s2", "s2.neg"},
    "no-negation": {"prop", "s1", "s1.ctx", "s2"},
}


@dataclass
class ModelConfig:
    d: int = 64
    max_props: int = 10
    max_candidates: int = 10
    heads: int = 4
    s2_heads: int = 4
    ffn_mult: int = 4
    fusion_scale: float = 1000.0
    uniformity_margin: float = 0.3
    negation_margin: float = 0.2
    ablation: str = "full"
    interaction: str = "flat"
    subtract: str = "replace"
    normalize: bool = True
    init_seed: int = 10

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.interaction not in INTERACTIONS:
            raise ConfigError(f"interaction must be one of {INTERACTIONS}")
        if self.subtract not in SUBTRACT_MODES:
            raise ConfigError(f"subtract must be one of {SUBTRACT_MODES}")
        if not self.fusion_scale > 0 or not self.negation_margin > 0:
            raise ConfigError("fusion_scale and negation_margin must be positive")
        if not 1 <= self.max_props <= 10:
            raise ConfigError("max_props must lie in 1..10")
        if self.d % self.heads or (2 * self.d) % self.s2_heads:
            raise ConfigError("head counts must divide the model widths")

    @property
    def groups(self) -> set:
        return _GROUPS[self.ablation]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def build_params(cfg: ModelConfig, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(cfg.init_seed)
    store = ParamStore(dtype)
    hidden = cfg.ffn_mult * cfg.d
    g = cfg.groups
    init_propositions(store, cfg.d, cfg.max_props, hidden, rng)
    init_system1(store, cfg.d, hidden, rng, cfg.max_candidates, modifier="s1.ctx" in g)
    if "s2" in g:
        init_system2(store, cfg.d, rng, negation="s2.neg" in g)
    if "comb" in g:
        init_combiner(store, cfg.d, rng)
    return store


def param_group(name: str) -> str:
    if name.startswith(("s1.ctx_tf", "s1.mod")):
        return "s1.ctx"
    if name.startswith("s2.neg"):
        return "s2.neg"
    return name.split(".")[0]


@dataclass
class Batch:
    text: np.ndarray  # (B, T, d)
    text_valid: np.ndarray  # (B, T) bool
    images: np.ndarray  # (B, L, d)
    cross: np.ndarray  # (B, L, d)
    gold: np.ndarray  # (B,)
    count: np.ndarray  # (B,)

    def __len__(self):
        return len(self.gold)


def collate(instances, dtype=np.float32) -> Batch:
    instances = list(instances)
    if not instances:
        raise ValueError("empty batch")
    d, L = instances[0].d, instances[0].L
    T = max(inst.text.shape[0] for inst in instances)
    B = len(instances)
    text = np.zeros((B, T, d), dtype=dtype)
    valid = np.zeros((B, T), dtype=bool)
    for i, inst in enumerate(instances):
        if inst.d != d or inst.L != L or inst.text.shape[1] != d:
            raise DimensionError(f"instance {i} has d={inst.d}, L={inst.L}; batch expects d={d}, L={L}")
        n = inst.text.shape[0]
        text[i, :n] = inst.text
        valid[i, :n] = True
    return Batch(
        text=text,
        text_valid=valid,
        images=np.stack([inst.images for inst in instances]).astype(dtype),
        cross=np.stack([inst.cross for inst in instances]).astype(dtype),
        gold=np.array([inst.gold for inst in instances], dtype=np.int64),
        count=np.array([inst.count for inst in instances], dtype=np.int64),
    )


def forward(store: ParamStore, batch: Batch, cfg: ModelConfig, mode: Mode = EVAL, counts: np.ndarray | None = None,
            ablation: str | None = None) -> dict:
    """Run the head on a batch.

    ``counts`` selects how many proposition slots each instance uses; by
    default the gold counts (teacher forcing). ``ablation`` overrides the
    evaluation path on a model that has the needed parameters.
    Returns a score bundle of tensors keyed by name plus ``prop_mask``.
    """
    ablation = ablation or cfg.ablation
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}")
    need = _GROUPS[ablation] & {"s1.ctx", "s2", "s2.neg", "comb"}
    have = {param_group(n) for n in store.names()}
    if not need <= have:
        raise ConfigError(f"ablation {ablation!r} needs parameter groups {sorted(need - have)} this model lacks")
    if batch.images.shape[-1] != store["prop.seed"].shape[1]:
        raise DimensionError(
            f"data width d={batch.images.shape[-1]} does not match model width d={store['prop.seed'].shape[1]}"
        )
    dtype = store.dtype
    text = Tensor(batch.text.astype(dtype))
    images = Tensor(batch.images.astype(dtype))
    B, L, _ = batch.images.shape
    K = store["prop.seed"].shape[0]

    count_logits = predict_count(store, text[:, 0, :])
    if counts is None:
        counts = batch.count
    counts = np.clip(np.asarray(counts), 1, K)
    M = int(counts.max())
    prop_mask = np.arange(M)[None, :] < counts[:, None]

    slots_all = parse_propositions(store, text, batch.text_valid, cfg.heads, mode, cfg.subtract)
    slots = slots_all[:, :M, :]
    out = {"count_logits": count_logits, "slots": slots, "prop_mask": prop_mask}

    fused = fuse(slots, images, cfg.fusion_scale)
    use_ctx = "s1.ctx" in _GROUPS[ablation]
    cross = Tensor(batch.cross.astype(dtype)) if use_ctx else None
    h_p, h_c = contextual_interact(store, fused, cross, prop_mask, cfg.heads, mode, cfg.interaction)
    h_s1 = modify(store, h_p, h_c) if use_ctx else h_p
    p_s1 = score(store, h_s1)
    out.update(s1_states=h_p, context=h_c, modified_states=h_s1, s1_scores=p_s1)

    if "s2" in _GROUPS[ablation]:
        h_n = p_n = neg_joint = None
        if "s2.neg" in _GROUPS[ablation]:
            h_n = negate(store, h_s1)
            p_n = score(store, h_n)
            neg_joint = joint_representation(p_n, h_n, images)
        pos_joint = joint_representation(p_s1, h_s1, images)
        conj = conjunction(store, h_c, pos_joint, neg_joint, prop_mask, cfg.s2_heads)
        out.update(neg_states=h_n, neg_scores=p_n, s2_scores=conj["s2_scores"],
                   fused_states=conj["fused_states"], conj=conj)
        if "comb" in _GROUPS[ablation]:
            pf = pool(store, conj["fused_states"], cfg.normalize)
            ps = pool(store, h_s1, cfg.normalize)
            comb = combine(store, pf, ps, p_s1, conj["s2_scores"], prop_mask, cfg.normalize)
            out.update(final_logits=comb["final_logits"], prop_weights=comb["prop_weights"],
                       mix_gate=comb["mix_gate"], comb=comb)
    return out


def meanpool_scores(p_s1: np.ndarray, prop_mask: np.ndarray) -> np.ndarray:
    """Mean over active propositions of softmaxed System-1 scores: (B, M, L) -> (B, L)."""
    x = p_s1 - p_s1.max(axis=-1, keepdims=True)
    prob = np.exp(x)
    prob /= prob.sum(axis=-1, keepdims=True)
    m = prop_mask.astype(prob.dtype)[:, :, None]
    return (prob * m).sum(axis=1) / m.sum(axis=1)


def final_scores(out: dict, ablation: str) -> np.ndarray:
    """Scores whose argmax is the prediction under ``ablation``."""
    if ablation in ("system1-meanpool", "no-modifier"):
        return meanpool_scores(out["s1_scores"].data, out["prop_mask"])
    if ablation in ("system2-only", "no-negation"):
        return out["s2_scores"].data
    return out["final_logits"].data


def cross_entropy(logits: Tensor, gold: np.ndarray) -> Tensor:
    """Per-row cross-entropy of logits (..., L) against integer targets (...)."""
    if (gold < 0).any() or (gold >= logits.shape[-1]).any():
        raise ValueError(f"gold index out of range [0, {logits.shape[-1]})")
    logp = logits.log_softmax(axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, np.asarray(gold)[..., None], 1.0, axis=-1)
    return -(logp * Tensor(onehot)).sum(axis=-1)


def match_loss(out: dict, gold: np.ndarray, ablation: str = "full") -> Tensor:
    """Per-instance sum of cross-entropies over every head the ablation trains: (B,).

    For the full model this is M proposition rows, the System-2 row and the
    final row.
    """
    gold = np.asarray(gold)
    p_s1 = out["s1_scores"]
    B, M, L = p_s1.shape
    mask = out["prop_mask"]
    ce = cross_entropy(p_s1, np.broadcast_to(gold[:, None], (B, M)))
    total = (ce * Tensor(mask.astype(ce.dtype))).sum(axis=-1)
    if "s2" in _GROUPS[ablation]:
        total = total + cross_entropy(out["s2_scores"], gold)
    if "comb" in _GROUPS[ablation]:
        total = total + cross_entropy(out["final_logits"], gold)
    return total


def objective(out: dict, batch: Batch, cfg: ModelConfig, weights: dict | None = None) -> tuple[Tensor, dict]:
    """Batch-mean training loss and its per-term values (floats)."""
    w = {"match": 1.0, "neg": 1.0, "uniform": 1.0, "count": 1.0}
    if weights:
        w.update(weights)
    terms = {
        "match": match_loss(out, batch.gold, cfg.ablation).mean(),
        "uniform": uniformity_loss(out["slots"], out["prop_mask"], cfg.uniformity_margin).mean(),
        "count": cross_entropy(out["count_logits"], batch.count - 1).mean(),
    }
    if out.get("neg_scores") is not None:
        terms["neg"] = negation_feedback_loss(out["neg_scores"], out["s1_scores"], out["prop_mask"],
                                              cfg.negation_margin).mean()
    total = None
    for k, t in terms.items():
        part = t * w[k]
        total = part if total is None else total + part
    return total, {k: float(t.data) for k, t in terms.items()}
