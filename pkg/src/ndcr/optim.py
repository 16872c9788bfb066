"""Named parameter storage and an Adam optimizer with linear learning-rate decay."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass
class OptimizerConfig:
    lr: float = 6e-5
    batch_size: int = 36
    dropout: float = 0.1
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 10

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


def learning_rate(cfg: OptimizerConfig, epoch: int) -> float:
    """Rate used during ``epoch`` (number of completed epochs): lr0 * (1 - e/E), floored at 0."""
    return cfg.lr * max(0.0, 1.0 - epoch / cfg.epochs)


class ParamStore:
    """Ordered mapping of unique names to trainable tensors, plus Adam moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]

    def size(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Current gradients by name; parameters the loss did not reach get zeros."""
        return {
            n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in self._params.items()
        }

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self._params.items())

    def load_state_dict(self, state, strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for n, arr in state.items():
            p = self._params[n]
            arr = np.asarray(arr)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def astype(self, dtype) -> "ParamStore":
        """Copy with parameters cast to ``dtype``; moments are reset."""
        out = ParamStore(dtype)
        for n, p in self._params.items():
            out.add(n, p.data)
        return out


def adam_step(store: ParamStore, grads: dict, step_index: int, cfg: OptimizerConfig, epoch: int = 0) -> float:
    """Apply one bias-corrected Adam update in place. Returns the rate used.

    ``step_index`` counts updates starting at 1; ``epoch`` is the number of
    completed epochs and sets the linearly decayed rate.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    missing = [n for n in store.names() if n not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s): {missing}")
    lr = learning_rate(cfg, epoch)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step_index
    c2 = 1.0 - b2**step_index
    for name, p in store.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m, v = store.moments(name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)
    return lr
