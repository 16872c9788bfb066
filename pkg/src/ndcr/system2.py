"""System 2: negation executor and gated conjunction over proposition states."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .layers import attention, init_linear, init_mha, key_bias, linear, mlp2
from .optim import ParamStore
from .tensor import Tensor, concat


def init_system2(store: ParamStore, d: int, rng, negation: bool = True):
    if negation:
        init_linear(store, "s2.neg.l1", d, d, rng)
        init_linear(store, "s2.neg.l2", d, d, rng)
    store.add("s2.attn.ws", rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(2 * d, 2 * d)))
    init_mha(store, "s2.attn", 2 * d, 2 * d, 2 * d, rng)
    init_linear(store, "s2.gate", 4 * d, 1, rng)
    store.add("s2.out", rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(2 * d, d)))
    init_linear(store, "s2.head", d, 1, rng)


def negate(store: ParamStore, states: Tensor) -> Tensor:
    """W2 ReLU(W1 h + b1) + b2 applied to every (proposition, image) state."""
    return mlp2(store, "s2.neg", states)


def joint_representation(logits: Tensor, states: Tensor, images: Tensor) -> Tensor:
    """[softmax(p_i) . images ; h_i[l]] for every proposition i and image l.

    ``logits`` (B, M, L), ``states`` (B, M, L, d), ``images`` (B, L, d);
    returns (B, M, L, 2d).
    """
    B, M, L, d = states.shape
    if logits.shape != (B, M, L) or images.shape != (B, L, d):
        raise ShapeError("joint_representation", logits.shape, images.shape)
    summary = logits.softmax(axis=-1) @ images
    summary = summary.reshape(B, M, 1, d).broadcast_to((B, M, L, d))
    return concat([summary, states], axis=-1)


def conjunction_query(store: ParamStore, context: Tensor) -> Tensor:
    """W_s [context_l ; mean_l' context_l'] -> (B, L, 2d)."""
    B, L, d = context.shape
    mean = context.mean(axis=1, keepdims=True).broadcast_to((B, L, d))
    return concat([context, mean], axis=-1) @ store["s2.attn.ws"]


def conjunction(store: ParamStore, context: Tensor, positives: Tensor, negatives: Tensor | None,
                prop_mask: np.ndarray | None = None, heads: int = 4, project_out: bool = True) -> dict:
    """Attend across propositions per image, gate the two branches, and score.

    ``positives``/``negatives`` are (B, M, L, 2d). ``negatives=None`` drops the
    negation branch. Returns ``pos_summary``, ``neg_summary``, ``pos_gate``, ``neg_gate``,
    ``query``, ``weights``, ``fused_states`` (B, L, d) and ``s2_scores`` (B, L).
    """
    B, M, L, d2 = positives.shape
    if M == 0:
        raise ShapeError("conjunction", positives.shape, ("M>=1",))
    query = conjunction_query(store, context)
    q = query.reshape(B, L, 1, d2)
    bias = None if prop_mask is None else key_bias(prop_mask.reshape(B, 1, M), positives.dtype)

    def branch(joint):
        keys = joint.transpose(0, 2, 1, 3)
        h, w = attention(store, "s2.attn", q, keys, heads, bias, project_out=project_out)
        h = h.reshape(B, L, d2)
        g = (linear(store, "s2.gate", concat([h, query], axis=-1))).sigmoid()
        return h, g, w

    h_pos, g_pos, w_pos = branch(positives)
    mixed = h_pos * g_pos
    out = {"pos_summary": h_pos, "pos_gate": g_pos, "pos_attention": w_pos, "query": query,
           "neg_summary": None, "neg_gate": None, "neg_attention": None}
    if negatives is not None:
        h_neg, g_neg, w_neg = branch(negatives)
        mixed = mixed + h_neg * g_neg
        out.update(neg_summary=h_neg, neg_gate=g_neg, neg_attention=w_neg)
    h_f = mixed @ store["s2.out"]
    p = linear(store, "s2.head", h_f)
    out["fused_states"] = h_f
    out["s2_scores"] = p.reshape(B, L)
    return out


def negation_feedback_loss(neg_logits: Tensor, pos_logits: Tensor, mask: np.ndarray | None = None,
                           negation_margin: float = 0.2) -> Tensor:
    """Sum over propositions of max(negation_margin - KL(softmax(p-) || softmax(p+)), 0), per instance.

    The positive distribution is a fixed target: no gradient flows into
    ``pos_logits``. Inputs are (B, M, L); returns (B,).
    """
    if not negation_margin > 0:
        raise ValueError(f"negation_margin must be positive, got {negation_margin}")
    if neg_logits.shape != pos_logits.shape:
        raise ShapeError("negation_feedback_loss", neg_logits.shape, pos_logits.shape)
    log_n = neg_logits.log_softmax(axis=-1)
    log_p = pos_logits.detach().log_softmax(axis=-1)
    kl = (log_n.exp() * (log_n - log_p)).sum(axis=-1)
    hinge = (negation_margin - kl).relu()
    if mask is not None:
        hinge = hinge * Tensor(mask.astype(hinge.dtype))
    return hinge.sum(axis=-1)


def kl_divergence(neg_logits: np.ndarray, pos_logits: np.ndarray) -> np.ndarray:
    """KL(softmax(neg) || softmax(pos)) along the last axis, in numpy (diagnostics)."""
    def log_softmax(x):
        x = x - x.max(axis=-1, keepdims=True)
        return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))

    ln, lp = log_softmax(neg_logits), log_softmax(pos_logits)
    return (np.exp(ln) * (ln - lp)).sum(axis=-1)
