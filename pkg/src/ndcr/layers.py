"""Parameter initializers and the dense building blocks shared by every module.

Layers are plain functions over a :class:`ParamStore` and a name prefix, so
the parameter naming scheme is the only structure a checkpoint has to carry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .optim import ParamStore
from .tensor import Tensor, dropout, layer_norm

NEG_INF = -1e9


@dataclass
class Mode:
    """Forward-pass switches: dropout is active only when ``training`` is set."""

    training: bool = False
    dropout: float = 0.0
    rng: np.random.Generator | None = field(default=None, repr=False)

    def drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.dropout, self.rng, self.training)


EVAL = Mode()


# -- initializers ---------------------------------------------------------------

def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng, bias: bool = True, scale: float = 1.0):
    store.add(f"{name}.w", rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(n_out))


def init_layer_norm(store: ParamStore, name: str, d: int):
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def init_mha(store: ParamStore, name: str, d_query: int, d_kv: int, d_model: int, rng):
    init_linear(store, f"{name}.q", d_query, d_model, rng)
    init_linear(store, f"{name}.k", d_kv, d_model, rng)
    init_linear(store, f"{name}.v", d_kv, d_model, rng)
    init_linear(store, f"{name}.o", d_model, d_model, rng)


def init_ffn(store: ParamStore, name: str, d: int, hidden: int, rng):
    init_linear(store, f"{name}.fc1", d, hidden, rng)
    init_linear(store, f"{name}.fc2", hidden, d, rng)


def init_encoder_layer(store: ParamStore, name: str, d: int, hidden: int, rng):
    init_mha(store, f"{name}.attn", d, d, d, rng)
    init_layer_norm(store, f"{name}.ln1", d)
    init_ffn(store, f"{name}.ffn", d, hidden, rng)
    init_layer_norm(store, f"{name}.ln2", d)


# -- blocks --------------------------------------------------------------------

def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    y = x @ store[f"{name}.w"]
    b = f"{name}.b"
    return y + store[b] if b in store else y


def norm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def ffn(store: ParamStore, name: str, x: Tensor, mode: Mode = EVAL) -> Tensor:
    h = linear(store, f"{name}.fc1", x).relu()
    return linear(store, f"{name}.fc2", mode.drop(h))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, heads, d // heads)
    n = x.ndim
    return x.transpose(*range(n - 3), n - 2, n - 3, n - 1)


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    x = x.transpose(*range(n - 3), n - 2, n - 3, n - 1)
    *lead, t, h, dh = x.shape
    return x.reshape(*lead, t, h * dh)


def key_bias(valid: np.ndarray, dtype=np.float32) -> Tensor:
    """Additive attention bias from a boolean key mask (..., T): 0 where valid, -1e9 elsewhere."""
    return Tensor(np.where(valid, 0.0, NEG_INF).astype(dtype))


def attention(
    store: ParamStore,
    name: str,
    query: Tensor,
    memory: Tensor,
    heads: int,
    bias: Tensor | None = None,
    project_out: bool = True,
):
    """Scaled dot-product multi-head attention.

    ``query`` is (..., Tq, dq) and ``memory`` is (..., Tk, dk). ``bias`` is an
    additive (..., Tk) key bias broadcast over heads and queries. Returns the
    attended values (..., Tq, d_model) and the weights (..., heads, Tq, Tk).
    """
    q = _split_heads(linear(store, f"{name}.q", query), heads)
    k = _split_heads(linear(store, f"{name}.k", memory), heads)
    v = _split_heads(linear(store, f"{name}.v", memory), heads)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        *lead, tk = bias.shape
        scores = scores + bias.reshape(*lead, 1, 1, tk)
    weights = scores.softmax(axis=-1)
    out = _merge_heads(weights @ v)
    if project_out:
        out = linear(store, f"{name}.o", out)
    return out, weights


def encoder_layer(store: ParamStore, name: str, x: Tensor, heads: int, bias: Tensor | None = None,
                  mode: Mode = EVAL) -> Tensor:
    """Post-norm transformer encoder layer."""
    a, _ = attention(store, f"{name}.attn", x, x, heads, bias)
    x = norm(store, f"{name}.ln1", x + mode.drop(a))
    f = ffn(store, f"{name}.ffn", x, mode)
    return norm(store, f"{name}.ln2", x + mode.drop(f))


def mlp2(store: ParamStore, name: str, x: Tensor) -> Tensor:
    """Two-layer perceptron with a ReLU between (``{name}.l1`` then ``{name}.l2``)."""
    return linear(store, f"{name}.l2", linear(store, f"{name}.l1", x).relu())

