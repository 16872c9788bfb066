"""Combining System 1 and System 2 into the final candidate scores."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .layers import key_bias
from .optim import ParamStore
from .tensor import Tensor, concat


def init_combiner(store: ParamStore, d: int, rng):
    s = 1.0 / np.sqrt(d)
    store.add("comb.wl", rng.normal(0.0, s, size=(d, 1)))
    store.add("comb.bl", np.zeros(1))
    store.add("comb.wa", rng.normal(0.0, s, size=(d, d)))
    store.add("comb.wb", rng.normal(0.0, s, size=(d, d)))
    store.add("comb.bc", np.zeros(d))
    store.add("comb.v", rng.normal(0.0, s, size=(d, 1)))
    store.add("comb.bv", np.zeros(1))
    store.add("comb.wf", rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(2 * d, 1)))
    store.add("comb.bf", np.zeros(1))


def pool(store: ParamStore, states: Tensor, normalize: bool = True) -> Tensor:
    """Weighted sum of rows (..., L, d) -> (..., d) with weights from W_l h + b_l.

    With ``normalize`` the weights are softmaxed over positions, making the
    result a convex combination of the rows.
    """
    w = states @ store["comb.wl"] + store["comb.bl"]
    if normalize:
        w = w.softmax(axis=-2)
    return (w * states).sum(axis=-2)


def combine(store: ParamStore, pooled_f: Tensor, pooled_s1: Tensor, p_s1: Tensor, p_s2: Tensor,
            prop_mask: np.ndarray | None = None, normalize: bool = True, force_gate: float | None = None) -> dict:
    """Gate between the proposition-weighted System-1 scores and the System-2 scores.

    Shapes: ``pooled_f`` (B, d), ``pooled_s1`` (B, M, d), ``p_s1`` (B, M, L),
    ``p_s2`` (B, L). ``force_gate`` pins the gate (1 keeps only System 1,
    0 only System 2). Returns ``final_logits``, ``prop_weights``, ``mix_gate``, ``h_c``, ``aggregate``.
    """
    B, M, d = pooled_s1.shape
    if M == 0:
        raise ShapeError("combine", pooled_s1.shape, ("M>=1",))
    if pooled_f.shape != (B, d) or p_s1.shape[:2] != (B, M) or p_s2.shape != (B, p_s1.shape[2]):
        raise ShapeError("combine", pooled_s1.shape, p_s1.shape)
    L = p_s1.shape[2]
    mask = np.ones((B, M), dtype=bool) if prop_mask is None else prop_mask
    e = (pooled_f @ store["comb.wa"]).reshape(B, 1, d) + pooled_s1 @ store["comb.wb"] + store["comb.bc"]
    s = (e @ store["comb.v"]).reshape(B, M) + store["comb.bv"]
    if normalize:
        s = (s + key_bias(mask, s.dtype)).softmax(axis=-1)
    else:
        s = s * Tensor(mask.astype(s.dtype))
    h_c = (e * Tensor(mask.astype(e.dtype).reshape(B, M, 1))).sum(axis=1)
    if force_gate is None:
        mix_gate = (concat([pooled_f, h_c], axis=-1) @ store["comb.wf"] + store["comb.bf"]).sigmoid()
    else:
        mix_gate = Tensor(np.full((B, 1), force_gate, dtype=p_s2.dtype))
    aggregate = (s.reshape(B, 1, M) @ p_s1).reshape(B, L)
    p_f = mix_gate * aggregate + (1.0 - mix_gate) * p_s2
    return {"final_logits": p_f, "prop_weights": s, "mix_gate": mix_gate, "h_c": h_c, "aggregate": aggregate}
