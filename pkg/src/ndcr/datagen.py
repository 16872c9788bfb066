"""Synthetic compositional retrieval instances with known logical structure.

Each instance is a conjunction of M attribute clauses ("has attribute a" or
"does not have attribute a") and L candidate attribute vectors of which
exactly one satisfies every clause. Distractors are the gold vector with one
clause attribute flipped, so every clause matters for some distractor.

Attribute structure is then encoded into embeddings standing in for frozen
text, image and cross-modal encoders.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError

DEFAULT_COUNT_WEIGHTS = (61, 863, 1239, 126, 16)
POLARITY_ENCODINGS = ("marker", "reflect")


@dataclass(frozen=True)
class GenConfig:
    d: int = 64
    L: int = 10
    A: int = 12
    count_weights: tuple = DEFAULT_COUNT_WEIGHTS
    neg_prob: float = 0.3
    noise: float = 0.05
    seed: int = 0
    encoder_seed: int = 1234
    alignment: float = 1.0
    polarity: str = "marker"

    def __post_init__(self):
        object.__setattr__(self, "count_weights", tuple(float(w) for w in self.count_weights))
        w = np.asarray(self.count_weights)
        if self.L < 2:
            raise ConfigError(f"L must be >= 2, got {self.L}")
        if self.d < 1 or self.A < 1:
            raise ConfigError("d and A must be positive")
        if not 1 <= len(w) <= 10:
            raise ConfigError(f"count weights must cover 1..K with 1 <= K <= 10, got {len(w)} entries")
        if (w < 0).any() or not w.sum() > 0 or not np.isfinite(w).all():
            raise ConfigError("count weights must be nonnegative and not all zero")
        if not 0.0 <= self.neg_prob <= 1.0:
            raise ConfigError(f"neg_prob must lie in [0, 1], got {self.neg_prob}")
        if self.noise < 0:
            raise ConfigError("noise scale must be nonnegative")
        if self.polarity not in POLARITY_ENCODINGS:
            raise ConfigError(f"polarity must be one of {POLARITY_ENCODINGS}, got {self.polarity!r}")
        if not 0.0 <= self.alignment <= 1.0:
            raise ConfigError("alignment must lie in [0, 1]")
        if self.max_count > self.A:
            raise ConfigError(f"{self.max_count} distinct clauses need at least that many attributes, A={self.A}")
        # every distractor keeps the clause bits of gold except one, and the A-1
        # remaining bits must leave room for L-1 distinct vectors
        if self.L - 1 > 2 ** (self.A - 1):
            raise ConfigError(f"cannot build {self.L} distinct candidates from {self.A} attributes")

    @property
    def max_count(self) -> int:
        return int(np.flatnonzero(np.asarray(self.count_weights) > 0).max()) + 1

    @property
    def count_probs(self) -> np.ndarray:
        w = np.asarray(self.count_weights, dtype=np.float64)
        return w / w.sum()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["count_weights"] = list(self.count_weights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown generator option(s): {sorted(extra)}")
        return cls(**data)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RawInstance:
    attrs: np.ndarray  # (L, A) uint8
    clauses: list  # [(attribute, polarity)] with polarity +1 / -1
    gold: int
    seed: int

    def tobytes(self) -> bytes:
        c = np.asarray(self.clauses, dtype=np.int64).reshape(-1, 2)
        head = np.asarray([self.gold, self.seed], dtype=np.uint64)
        return head.tobytes() + c.tobytes() + self.attrs.astype(np.uint8).tobytes()


@dataclass
class Instance:
    text: np.ndarray  # (N + 1, d); row 0 is the global token
    images: np.ndarray  # (L, d)
    cross: np.ndarray  # (L, d)
    gold: int
    count: int
    masks: np.ndarray  # (count, L) bool, diagnostics only
    seed: int = 0
    config_hash: str = field(default="")

    @property
    def d(self) -> int:
        return self.images.shape[1]

    @property
    def L(self) -> int:
        return self.images.shape[0]


def instance_seed(master: int, index: int) -> int:
    """Per-instance seed from a counter split off the master seed."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, np.uint64)[0])


def satisfies(attrs, clause) -> bool:
    attribute, polarity = clause
    bit = int(attrs[attribute])
    return bit == 1 if polarity > 0 else bit == 0


def generate_raw(seed: int, cfg: GenConfig) -> RawInstance:
    rng = np.random.default_rng(seed)
    K = len(cfg.count_weights)
    m = int(rng.choice(np.arange(1, K + 1), p=cfg.count_probs))
    attributes = rng.choice(cfg.A, size=m, replace=False)
    polarity = np.where(rng.random(m) < cfg.neg_prob, -1, 1)
    gold_vec = rng.integers(0, 2, size=cfg.A).astype(np.uint8)
    gold_vec[attributes] = polarity > 0
    q = int(rng.integers(cfg.L))

    seen = {gold_vec.tobytes()}
    distractors = []
    for _ in range(10_000):
        if len(distractors) == cfg.L - 1:
            break
        cand = rng.integers(0, 2, size=cfg.A).astype(np.uint8)
        cand[attributes] = gold_vec[attributes]
        j = attributes[rng.integers(m)]
        cand[j] ^= 1
        key = cand.tobytes()
        if key in seen:
            continue
        seen.add(key)
        distractors.append(cand)
    else:
        raise ConfigError("could not draw enough distinct distractors")

    attrs = np.empty((cfg.L, cfg.A), dtype=np.uint8)
    attrs[q] = gold_vec
    others = [i for i in range(cfg.L) if i != q]
    attrs[others] = np.stack(distractors)
    clauses = [(int(a), int(p)) for a, p in zip(attributes, polarity)]
    return RawInstance(attrs=attrs, clauses=clauses, gold=q, seed=int(seed))


@dataclass(frozen=True)
class Encoders:
    clause_dict: np.ndarray  # (A, d)
    neg: np.ndarray  # (d,)
    image_proj: np.ndarray  # (A, d)
    cross_mix: np.ndarray  # (d, d)
    count_code: np.ndarray  # (10, d), added to the global token


@lru_cache(maxsize=16)
def _encoders(d: int, A: int, seed: int, alignment: float) -> Encoders:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    clause_dict = rng.normal(0.0, scale, size=(A, d))
    free = rng.normal(0.0, scale, size=(A, d))
    image_proj = alignment * clause_dict + np.sqrt(1.0 - alignment**2) * free
    # the negation marker and count codes live outside the attribute subspace so
    # they carry their own information without shifting clause-image agreement
    basis = np.linalg.qr(np.concatenate([clause_dict, image_proj]).T)[0]
    outside = lambda x: x - (x @ basis) @ basis.T  # noqa: E731
    neg = outside(rng.normal(0.0, scale, size=d))
    cross_mix = rng.normal(0.0, scale, size=(d, d)) * np.sqrt(d)
    count_code = outside(rng.normal(0.0, 4.0 * scale, size=(10, d)))
    return Encoders(clause_dict, neg, image_proj, cross_mix, count_code)


def encoders(cfg: GenConfig) -> Encoders:
    """Fixed encoding matrices shared by every instance built with ``cfg.encoder_seed``."""
    return _encoders(cfg.d, cfg.A, cfg.encoder_seed, cfg.alignment)


def clause_masks(raw: RawInstance) -> np.ndarray:
    return np.array([[satisfies(a, c) for a in raw.attrs] for c in raw.clauses], dtype=bool)


def clause_row(enc: Encoders, attribute: int, polarity: int, style: str = "marker") -> np.ndarray:
    """Text embedding of one clause.

    ``marker``: E[a] + polarity * v_neg, with images built from 0/1 attribute bits.
    ``reflect``: a negated clause points away from its attribute (-E[a] + v_neg)
    and images use -1/+1 attribute signs, so clause-image agreement is linear.
    """
    if style == "marker":
        return enc.clause_dict[attribute] + polarity * enc.neg
    return polarity * enc.clause_dict[attribute] + (polarity < 0) * enc.neg


def encode(raw: RawInstance, cfg: GenConfig) -> Instance:
    enc = encoders(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([raw.seed, 1]))
    m = len(raw.clauses)
    rows = np.stack([clause_row(enc, a, p, cfg.polarity) for a, p in raw.clauses])
    text = np.empty((m + 1, cfg.d))
    text[1:] = rows + cfg.noise * rng.normal(size=rows.shape)
    text[0] = rows.mean(axis=0) + enc.count_code[m - 1] + cfg.noise * rng.normal(size=cfg.d)
    bits = raw.attrs.astype(np.float64)
    images = (2.0 * bits - 1.0 if cfg.polarity == "reflect" else bits) @ enc.image_proj
    images += cfg.noise * rng.normal(size=images.shape)
    cross = (text[0] * images) @ enc.cross_mix
    return Instance(
        text=text.astype(np.float32),
        images=images.astype(np.float32),
        cross=cross.astype(np.float32),
        gold=raw.gold,
        count=m,
        masks=clause_masks(raw),
        seed=raw.seed,
        config_hash=cfg.hash(),
    )


def generate(cfg: GenConfig, n: int, start: int = 0) -> list[Instance]:
    """``n`` encoded instances for indices ``start .. start+n-1`` of ``cfg.seed``'s stream."""
    return [encode(generate_raw(instance_seed(cfg.seed, i), cfg), cfg) for i in range(start, start + n)]


def decode_attributes(inst: Instance, cfg: GenConfig) -> np.ndarray:
    """Recover candidate attribute bits from image embeddings by least squares."""
    enc = encoders(cfg)
    coef, *_ = np.linalg.lstsq(enc.image_proj.T, inst.images.astype(np.float64).T, rcond=None)
    return (coef.T > (0.0 if cfg.polarity == "reflect" else 0.5)).astype(np.uint8)


def decode_clauses(inst: Instance, cfg: GenConfig) -> list:
    """Recover (attribute, polarity) per clause row by nearest dictionary entry."""
    enc = encoders(cfg)
    book = np.stack([clause_row(enc, a, p, cfg.polarity) for p in (1, -1) for a in range(cfg.A)])
    out = []
    for row in inst.text[1:].astype(np.float64):
        k = int(np.argmin(((book - row) ** 2).sum(axis=1)))
        out.append((k % cfg.A, 1 if k < cfg.A else -1))
    return out
