"""Central finite-difference checks of every module's gradients, in float64.

Each check builds a small random instance of one module, reduces its output
to a scalar with a fixed random projection, and compares the reverse-mode
gradient of every parameter and input against

    (f(x + h e_i) - f(x - h e_i)) / 2h,    h = 1e-4

on a random sample of coordinates per tensor. A coordinate whose stencil
flips any ReLU between x - h e_i and x + h e_i sits on a kink, where the
central difference does not estimate the derivative; it is replaced by
another sample. The reported error for a tensor is
||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6 max(1, |f|))
over the sampled coordinates; the floor keeps exactly-zero gradients
(key-projection biases under softmax shift invariance) from turning rounding
noise into a large relative error.

The negation feedback loss stops gradients into its positive distribution,
so finite differences of the total loss would disagree with the reverse pass
by design. Checks that include it feed the positive scores as a constant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import combiner, propositions, system1, system2
from .layers import attention, encoder_layer, init_encoder_layer, init_mha
from .model import ModelConfig, build_params, collate, cross_entropy, forward, match_loss, objective
from .optim import ParamStore
from .tensor import Tensor, concat, dropout, layer_norm, trace_relu

STEP = 1e-4
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(loss_fn, tensors: dict, step: float = STEP, max_entries: int = 6, rng=None) -> dict:
    """Compare reverse-mode and central-difference gradients of ``loss_fn()``.

    ``tensors`` maps names to float64 leaf tensors that ``loss_fn`` reads.
    Returns name -> relative error; NaN marks a tensor whose every coordinate
    sits on a ReLU kink (no valid stencil at this point).
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors.values():
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.requires_grad = True
        t.grad = None
    with trace_relu() as base_pattern:
        loss = loss_fn()
    loss.backward()
    floor = 1e-6 * max(1.0, abs(float(loss.data)))
    errors = {}
    for name, t in tensors.items():
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        used, numeric = [], []
        for i in rng.permutation(flat.size):
            if len(used) == max_entries:
                break
            orig = flat[i]
            flat[i] = orig + step
            with trace_relu() as up_pattern:
                up = float(loss_fn().data)
            flat[i] = orig - step
            with trace_relu() as down_pattern:
                down = float(loss_fn().data)
            flat[i] = orig
            if not (_same_pattern(base_pattern, up_pattern) and _same_pattern(base_pattern, down_pattern)):
                continue
            used.append(i)
            numeric.append((up - down) / (2 * step))
        if not used:
            errors[name] = float("nan")
            continue
        errors[name] = relative_error(analytic[used], np.asarray(numeric), floor)
    return errors


def _project(out: Tensor, rng) -> Tensor:
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def _with_inputs(store: ParamStore, **inputs) -> dict:
    tensors = dict(store.items())
    tensors.update({f"input.{k}": v for k, v in inputs.items()})
    return tensors


# -- per-module checks ------------------------------------------------------------

def check_tensor_ops(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    shape = tuple(int(n) for n in rng.integers(2, 5, size=3))
    a = Tensor(rng.normal(size=shape))
    b = Tensor(rng.normal(size=shape))
    w = Tensor(rng.normal(size=(shape[-1], 3)))
    g = Tensor(rng.normal(size=shape[-1]) + 1.5)
    beta = Tensor(rng.normal(size=shape[-1]))
    drop_seed = int(rng.integers(1 << 30))

    def loss():
        x = (a + b) * (a - b) - a / (b * b + 1.0)
        y = concat([x.tanh(), x.sigmoid(), (a @ w).relu()], axis=-1)
        z = layer_norm(a, g, beta) + x.softmax(axis=1).swapaxes(0, 1).transpose(1, 0, 2)
        d = dropout(z, 0.3, np.random.default_rng(drop_seed), training=True)
        e = (b * 0.1).exp() + (a * a + 1.0).log() + (b * b + 1.0).sqrt()
        return _project(y, np.random.default_rng(1)) + _project(d, np.random.default_rng(2)) \
            + y.mean() + e.sum(axis=1).mean(axis=0).sum() + a.log_softmax(axis=-1).sum()

    return check_gradients(loss, {"a": a, "b": b, "w": w, "gain": g, "bias": beta}, rng=rng)


def check_attention(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d, heads = 8, 2
    store = ParamStore(np.float64)
    init_mha(store, "mha", d, d, d, rng)
    init_encoder_layer(store, "enc", d, 16, rng)
    q = Tensor(rng.normal(size=(2, 3, d)))
    m = Tensor(rng.normal(size=(2, 5, d)))
    valid = np.ones((2, 5), dtype=bool)
    valid[0, 3:] = False
    from .layers import key_bias

    def loss():
        out, _ = attention(store, "mha", q, m, heads, key_bias(valid, np.float64))
        return _project(encoder_layer(store, "enc", out, heads), np.random.default_rng(seed))

    return check_gradients(loss, _with_inputs(store, query=q, memory=m), rng=rng)


def check_parsing(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d, K = 8, 4
    store = ParamStore(np.float64)
    propositions.init_propositions(store, d, K, 16, rng)
    text = Tensor(rng.normal(size=(2, 4, d)))
    valid = np.array([[True] * 4, [True, True, True, False]])
    proj = np.random.default_rng(seed + 1)
    r = Tensor(proj.normal(size=(2, K, d)))

    def loss():
        return (propositions.parse_propositions(store, text, valid, heads=2) * r).sum()

    tensors = {k: v for k, v in _with_inputs(store, text=text).items() if not k.startswith("prop.count")}
    return check_gradients(loss, tensors, rng=rng)


def check_count_head(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d, K = 8, 5
    store = ParamStore(np.float64)
    propositions.init_propositions(store, d, K, 16, rng)
    h = Tensor(rng.normal(size=(4, d)))
    gold = rng.integers(0, K, size=4)

    def loss():
        return cross_entropy(propositions.predict_count(store, h), gold).sum()

    tensors = {k: v for k, v in store.items() if k.startswith("prop.count")}
    tensors["input.h_cls"] = h
    return check_gradients(loss, tensors, rng=rng)


def check_interactor(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d, M, L = 8, 2, 4
    store = ParamStore(np.float64)
    system1.init_system1(store, d, 16, rng, max_candidates=6)
    slots = Tensor(rng.normal(size=(2, M, d)))
    images = Tensor(rng.normal(size=(2, L, d)))
    cross = Tensor(rng.normal(size=(2, L, d)))
    mask = np.array([[True, True], [True, False]])
    proj = np.random.default_rng(seed + 1).normal(size=(2, M, L))

    def loss():
        fused = system1.fuse(slots, images, fusion_scale=10.0)
        h_p, h_c = system1.contextual_interact(store, fused, cross, mask, heads=2)
        return (system1.score(store, system1.modify(store, h_p, h_c)) * Tensor(proj)).sum()

    return check_gradients(loss, _with_inputs(store, slots=slots, images=images, cross=cross), rng=rng)


def check_reasoner(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d, M, L = 8, 3, 4
    store = ParamStore(np.float64)
    system2.init_system2(store, d, rng)
    system1.init_system1(store, d, 16, rng, max_candidates=6, modifier=False)
    h = Tensor(rng.normal(size=(2, M, L, d)))
    images = Tensor(rng.normal(size=(2, L, d)))
    ctx = Tensor(rng.normal(size=(2, L, d)))
    mask = np.array([[True, True, True], [True, True, False]])
    proj = np.random.default_rng(seed + 1).normal(size=(2, L))

    def loss():
        p = system1.score(store, h)
        hn = system2.negate(store, h)
        pn = system1.score(store, hn)
        out = system2.conjunction(
            store, ctx,
            system2.joint_representation(p, h, images),
            system2.joint_representation(pn, hn, images),
            mask, heads=2,
        )
        return (out["s2_scores"] * Tensor(proj)).sum() + _project(out["neg_gate"], np.random.default_rng(seed))

    tensors = {k: v for k, v in store.items() if k.startswith(("s2.", "s1.head"))}
    tensors.update({"input.states": h, "input.images": images, "input.context": ctx})
    return check_gradients(loss, tensors, rng=rng)


def check_combiner(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d, M, L = 8, 3, 5
    store = ParamStore(np.float64)
    combiner.init_combiner(store, d, rng)
    hf = Tensor(rng.normal(size=(2, L, d)))
    hs = Tensor(rng.normal(size=(2, M, L, d)))
    p1 = Tensor(rng.normal(size=(2, M, L)))
    p2 = Tensor(rng.normal(size=(2, L)))
    mask = np.array([[True, True, True], [True, False, False]])
    proj = np.random.default_rng(seed + 1).normal(size=(2, L))

    def loss():
        out = combiner.combine(store, combiner.pool(store, hf), combiner.pool(store, hs), p1, p2, mask)
        weights = _project(out["prop_weights"], np.random.default_rng(3))
        return (out["final_logits"] * Tensor(proj)).sum() + out["mix_gate"].sum() + weights

    inputs = _with_inputs(store, fused_states=hf, modified_states=hs, s1_scores=p1, s2_scores=p2)
    return check_gradients(loss, inputs, rng=rng)


def check_losses(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    B, M, L, d = 3, 3, 6, 8
    mask = np.array([[True, True, True], [True, True, False], [True, False, False]])
    slots = Tensor(rng.normal(size=(B, M, d)))
    pn = Tensor(rng.normal(size=(B, M, L)) * 0.3)
    pp = Tensor(rng.normal(size=(B, M, L)) * 0.3)
    pp_target = Tensor(rng.normal(size=(B, M, L)) * 0.3)
    p2 = Tensor(rng.normal(size=(B, L)))
    pf = Tensor(rng.normal(size=(B, L)))
    gold = rng.integers(0, L, size=B)

    def loss():
        bundle = {"s1_scores": pp, "s2_scores": p2, "final_logits": pf, "prop_mask": mask}
        return (
            match_loss(bundle, gold).sum()
            + system2.negation_feedback_loss(pn, pp_target, mask, negation_margin=0.2).sum()
            + propositions.uniformity_loss(slots, mask, uniformity_margin=-0.5).sum()
        )

    inputs = {"slots": slots, "neg_scores": pn, "s1_scores": pp, "s2_scores": p2, "final_logits": pf}
    return check_gradients(loss, inputs, rng=rng)


def check_full_model(seed: int) -> dict:
    from .datagen import GenConfig, generate

    rng = np.random.default_rng(seed)
    gcfg = GenConfig(d=8, L=4, A=6, count_weights=(1, 1, 1), seed=seed, encoder_seed=seed)
    batch = collate(generate(gcfg, 3), np.float64)
    mcfg = ModelConfig(d=8, max_props=4, max_candidates=4, heads=2, s2_heads=2, ffn_mult=2, fusion_scale=10.0,
                       init_seed=seed)
    store = build_params(mcfg, np.float64)

    def loss():
        out = forward(store, batch, mcfg)
        return objective(out, batch, mcfg, {"neg": 0.0})[0]

    return check_gradients(loss, dict(store.items()), max_entries=2, rng=rng)


MODULE_CHECKS = {
    "tensor-ops": check_tensor_ops,
    "attention": check_attention,
    "parsing": check_parsing,
    "count-head": check_count_head,
    "interactor": check_interactor,
    "reasoner": check_reasoner,
    "combiner": check_combiner,
    "losses": check_losses,
    "full-model": check_full_model,
}


@dataclass
class CheckResult:
    module: str
    seed: int
    max_error: float
    worst: str
    seconds: float
    checked: int = 0
    skipped: tuple = ()

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def run_gradcheck(modules=None, seeds=range(5)) -> list[CheckResult]:
    results = []
    for name in modules or MODULE_CHECKS:
        fn = MODULE_CHECKS[name]
        for seed in seeds:
            t0 = time.perf_counter()
            errs = fn(seed)
            skipped = tuple(k for k, v in errs.items() if np.isnan(v))
            valid = {k: v for k, v in errs.items() if not np.isnan(v)}
            worst = max(valid, key=valid.get)
            results.append(CheckResult(name, seed, valid[worst], worst, time.perf_counter() - t0,
                                       len(valid), skipped))
    return results
