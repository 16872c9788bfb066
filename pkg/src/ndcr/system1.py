"""System 1: proposition-image fusion, contextual interaction and the modifier."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .layers import EVAL, Mode, encoder_layer, init_encoder_layer, init_linear, key_bias, linear
from .optim import ParamStore
from .propositions import unit_rows
from .tensor import Tensor, concat

INTERACTIONS = ("flat", "per_prop")


def init_system1(store: ParamStore, d: int, hidden: int, rng, max_candidates: int = 10, layers: int = 2,
                 modifier: bool = True):
    store.add("s1.pe", rng.normal(0.0, 0.02, size=(max_candidates, d)))
    for i in range(layers):
        init_encoder_layer(store, f"s1.prop_tf.layer{i}", d, hidden, rng)
    if modifier:
        for i in range(layers):
            init_encoder_layer(store, f"s1.ctx_tf.layer{i}", d, hidden, rng)
        init_linear(store, "s1.mod.m2", 2 * d, 2 * d, rng)
        init_linear(store, "s1.mod.m1", 2 * d, d, rng)
    init_linear(store, "s1.head", d, 1, rng)


def fuse(slots: Tensor, images: Tensor, fusion_scale: float = 1000.0) -> Tensor:
    """fusion_scale * unit(slot_i) * unit(image_l) elementwise: (B, M, d) x (B, L, d) -> (B, M, L, d)."""
    if not fusion_scale > 0:
        raise ValueError("lambda must be positive")
    if slots.shape[0] != images.shape[0] or slots.shape[-1] != images.shape[-1]:
        raise ShapeError("fuse", slots.shape, images.shape)
    B, M, d = slots.shape
    L = images.shape[1]
    p = unit_rows(slots, "fuse").reshape(B, M, 1, d)
    v = unit_rows(images, "fuse").reshape(B, 1, L, d)
    return (p * v) * fusion_scale


def _stack(store: ParamStore, prefix: str, x: Tensor, heads: int, bias, mode: Mode) -> Tensor:
    i = 0
    while f"{prefix}.layer{i}.ln2.g" in store:
        x = encoder_layer(store, f"{prefix}.layer{i}", x, heads, bias, mode)
        i += 1
    return x


def contextual_interact(store: ParamStore, fused: Tensor, cross: Tensor | None, prop_mask: np.ndarray | None = None,
                        heads: int = 4, mode: Mode = EVAL, interaction: str = "flat"):
    """Run the proposition-image tokens and the compound-text context through their transformers.

    ``fused`` is (B, M, L, d); ``cross`` is (B, L, d) or None when the context
    branch is ablated. Returns (states (B, M, L, d), context (B, L, d) or None).
    """
    if interaction not in INTERACTIONS:
        raise ValueError(f"interaction must be one of {INTERACTIONS}")
    B, M, L, d = fused.shape
    pe = store["s1.pe"]
    if L > pe.shape[0]:
        raise ShapeError("contextual_interact", (L,), pe.shape)
    pos = pe[:L]
    x = fused + pos
    if interaction == "flat":
        bias = None
        if prop_mask is not None:
            bias = key_bias(np.repeat(prop_mask, L, axis=1), fused.dtype)
        x = _stack(store, "s1.prop_tf", x.reshape(B, M * L, d), heads, bias, mode).reshape(B, M, L, d)
    else:
        x = _stack(store, "s1.prop_tf", x, heads, None, mode)
    ctx = None
    if cross is not None:
        ctx = _stack(store, "s1.ctx_tf", cross + pos, heads, None, mode)
    return x, ctx


def modify(store: ParamStore, states: Tensor, context: Tensor) -> Tensor:
    """W_m1 ReLU(W_m2 [state; context]) with the context row of image l shared by every proposition."""
    B, M, L, d = states.shape
    ctx = context.reshape(B, 1, L, d).broadcast_to((B, M, L, d))
    h = linear(store, "s1.mod.m2", concat([states, ctx], axis=-1)).relu()
    return linear(store, "s1.mod.m1", h)


def score(store: ParamStore, states: Tensor, head: str = "s1.head") -> Tensor:
    """Linear head d -> 1 applied per position; drops the trailing axis."""
    out = linear(store, head, states)
    return out.reshape(out.shape[:-1])
