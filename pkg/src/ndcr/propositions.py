"""Semantic parsing: learned proposition slots read the compound text.

Each of the two layers runs self-attention over the slots, cross-attention
from the slots into the text, and feeds the *difference* of the two sublayer
outputs into the feed-forward block, so slots are pushed to carry what the
text adds beyond what the other slots already hold.

All functions take a leading batch axis.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .layers import (
    EVAL,
    Mode,
    attention,
    ffn,
    init_ffn,
    init_layer_norm,
    init_linear,
    init_mha,
    key_bias,
    linear,
    norm,
)
from .optim import ParamStore
from .tensor import Tensor

SUBTRACT_MODES = ("replace", "augment")


def init_propositions(store: ParamStore, d: int, K: int, hidden: int, rng, layers: int = 2):
    store.add("prop.seed", rng.normal(0.0, 1.0, size=(K, d)))
    for i in range(layers):
        name = f"prop.layer{i}"
        init_mha(store, f"{name}.self", d, d, d, rng)
        init_layer_norm(store, f"{name}.ln1", d)
        init_mha(store, f"{name}.cross", d, d, d, rng)
        init_layer_norm(store, f"{name}.ln2", d)
        init_ffn(store, f"{name}.ffn", d, hidden, rng)
        init_layer_norm(store, f"{name}.ln3", d)
    init_linear(store, "prop.count.l1", d, d, rng)
    init_linear(store, "prop.count.l2", d, K, rng)


def parse_layer(store: ParamStore, name: str, slots: Tensor, text: Tensor, text_bias: Tensor | None,
                heads: int, mode: Mode = EVAL, subtract: str = "replace") -> dict:
    """One parsing layer. Returns the intermediate tensors keyed ``self``, ``cross``, ``diff``, ``out``."""
    a, _ = attention(store, f"{name}.self", slots, slots, heads)
    s = norm(store, f"{name}.ln1", slots + mode.drop(a))
    x, _ = attention(store, f"{name}.cross", s, text, heads, text_bias)
    c = norm(store, f"{name}.ln2", s + mode.drop(x))
    diff = c - s
    f = ffn(store, f"{name}.ffn", diff, mode)
    base = diff if subtract == "replace" else c
    out = norm(store, f"{name}.ln3", base + mode.drop(f))
    return {"self": s, "cross": c, "diff": diff, "out": out}


def parse_propositions(store: ParamStore, text: Tensor, text_valid: np.ndarray | None = None, heads: int = 4,
                       mode: Mode = EVAL, subtract: str = "replace") -> Tensor:
    """Map text (B, N+1, d) to K proposition slots (B, K, d)."""
    if subtract not in SUBTRACT_MODES:
        raise ValueError(f"subtract must be one of {SUBTRACT_MODES}")
    if text.ndim != 3 or text.shape[1] < 2:
        raise ShapeError("parse_propositions", text.shape, ("B", "N+1>=2", "d"))
    seed = store["prop.seed"]
    B = text.shape[0]
    slots = seed.reshape(1, *seed.shape).broadcast_to((B, *seed.shape))
    bias = None if text_valid is None else key_bias(text_valid, text.dtype)
    i = 0
    while f"prop.layer{i}.ln3.g" in store:
        slots = parse_layer(store, f"prop.layer{i}", slots, text, bias, heads, mode, subtract)["out"]
        i += 1
    return slots


def predict_count(store: ParamStore, h_cls: Tensor) -> Tensor:
    """Logits over proposition counts 1..K from the global text token (B, d)."""
    return linear(store, "prop.count.l2", linear(store, "prop.count.l1", h_cls).relu())


def unit_rows(x: Tensor, op: str) -> Tensor:
    sq = (x * x).sum(axis=-1, keepdims=True)
    if (sq.data <= 0).any():
        raise ValueError(f"{op}: zero-norm vector")
    return x / sq.sqrt()


def uniformity_loss(slots: Tensor, mask: np.ndarray | None = None, uniformity_margin: float = 0.3) -> Tensor:
    """Mean over slot pairs i < j of max(0, cos(slot_i, slot_j) - uniformity_margin), per instance.

    ``slots`` is (B, M, d); ``mask`` (B, M) marks the active slots. Instances
    with fewer than two active slots contribute 0. Returns shape (B,).
    """
    B, M, _ = slots.shape
    if mask is None:
        mask = np.ones((B, M), dtype=bool)
    u = unit_rows(slots, "uniformity_loss")
    cos = u @ u.swapaxes(-1, -2)
    upper = np.triu(np.ones((M, M), dtype=bool), k=1)
    pairs = (mask[:, :, None] & mask[:, None, :] & upper).astype(slots.dtype)
    n_pairs = np.maximum(pairs.sum(axis=(1, 2)), 1.0)
    hinge = (cos - uniformity_margin).relu() * Tensor(pairs)
    return hinge.sum(axis=(1, 2)) * Tensor((1.0 / n_pairs).astype(slots.dtype))
