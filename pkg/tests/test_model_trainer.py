import math

import numpy as np
import pytest

import oracles
from ndcr.datagen import GenConfig, generate
from ndcr.errors import ConfigError, DimensionError
from ndcr.model import ABLATIONS, ModelConfig, build_params, final_scores, forward, match_loss, \
    meanpool_scores, objective, param_group
from ndcr.optim import OptimizerConfig
from ndcr.tensor import Tensor
from ndcr.trainer import TrainConfig, evaluate, restore, supported_ablations, train


def bundle(M, L=10, B=2, value=0.0):
    z = lambda *s: Tensor(np.full(s, value))  # noqa: E731
    return {"s1_scores": z(B, M, L), "s2_scores": z(B, L), "final_logits": z(B, L), "prop_mask": np.ones((B, M), bool)}


class TestMatchLoss:
    @pytest.mark.parametrize("M", [1, 3, 5])
    def test_uniform_logits(self, M):
        loss = match_loss(bundle(M), np.array([0, 7])).data
        assert np.allclose(loss, (M + 2) * math.log(10), atol=1e-6)

    def test_confident_correct_logits(self):
        out = bundle(2)
        for k in ("s1_scores", "s2_scores", "final_logits"):
            out[k].data[..., 3] = 30.0
        assert np.all(match_loss(out, np.array([3, 3])).data < 1e-9)

    @pytest.mark.parametrize("ablation,terms", [("system1-meanpool", 0), ("system2-only", 1), ("full", 2)])
    def test_terms_per_ablation(self, ablation, terms):
        loss = match_loss(bundle(3), np.array([1, 2]), ablation).data
        assert np.allclose(loss, (3 + terms) * math.log(10))

    def test_masked_rows_excluded(self):
        out = bundle(3)
        out["prop_mask"] = np.array([[True, False, False], [True, True, True]])
        assert np.allclose(match_loss(out, np.array([0, 0])).data, np.array([3, 5]) * math.log(10))

    @pytest.mark.parametrize("gold", [[10, 0], [-1, 0]])
    def test_gold_out_of_range(self, gold):
        with pytest.raises(ValueError):
            match_loss(bundle(1), np.array(gold))


class TestForward:
    def test_bundle_shapes(self, small_store, small_model_cfg, small_batch):
        out = forward(small_store, small_batch, small_model_cfg)
        B, L, M = 6, 4, int(small_batch.count.max())
        assert out["count_logits"].shape == (B, 10)
        assert out["s1_scores"].shape == out["neg_scores"].shape == (B, M, L)
        assert out["s2_scores"].shape == out["final_logits"].shape == (B, L)
        assert np.all((out["mix_gate"].data > 0) & (out["mix_gate"].data < 1))
        assert np.all((out["conj"]["pos_gate"].data > 0) & (out["conj"]["pos_gate"].data < 1))

    def test_final_gate_convexity(self, small_store, small_model_cfg, small_batch):
        out = forward(small_store, small_batch, small_model_cfg)
        aggregate, p2 = out["comb"]["aggregate"].data, out["s2_scores"].data
        pf = out["final_logits"].data
        assert np.all(pf >= np.minimum(aggregate, p2) - 1e-12) and np.all(pf <= np.maximum(aggregate, p2) + 1e-12)

    def test_dimension_mismatch(self, small_model_cfg, small_batch):
        store = build_params(ModelConfig(d=8, heads=2, s2_heads=2), np.float64)
        with pytest.raises(DimensionError):
            forward(store, small_batch, ModelConfig(d=8, heads=2, s2_heads=2))

    def test_ablation_needs_parameters(self, small_model_cfg, small_batch):
        cfg = ModelConfig(**{**small_model_cfg.to_dict(), "ablation": "system1-meanpool"})
        store = build_params(cfg, np.float64)
        with pytest.raises(ConfigError):
            forward(store, small_batch, cfg, ablation="full")

    def test_meanpool_single_proposition_preserves_ranking(self, small_store, small_model_cfg, small_batch):
        out = forward(small_store, small_batch, small_model_cfg, counts=np.ones(6, int), ablation="system1-meanpool")
        pooled = final_scores(out, "system1-meanpool")
        assert np.array_equal(pooled.argmax(-1), out["s1_scores"].data[:, 0].argmax(-1))
        assert np.allclose(pooled, oracles.softmax(out["s1_scores"].data[:, 0]))

    def test_meanpool_scores_sum_to_one(self):
        p = np.random.default_rng(0).normal(size=(3, 4, 6))
        mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1], [1, 0, 0, 0]], bool)
        s = meanpool_scores(p, mask)
        assert np.allclose(s.sum(-1), 1.0)
        assert np.allclose(s[2], oracles.softmax(p[2, 0]))

    def test_objective_terms(self, small_store, small_model_cfg, small_batch):
        out = forward(small_store, small_batch, small_model_cfg)
        total, terms = objective(out, small_batch, small_model_cfg)
        assert set(terms) == {"match", "uniform", "count", "neg"}
        assert float(total.data) == pytest.approx(sum(terms.values()))

    def test_full_model_groups(self, small_model_cfg):
        for ablation in ABLATIONS:
            cfg = ModelConfig(**{**small_model_cfg.to_dict(), "ablation": ablation})
            groups = {param_group(n) for n in build_params(cfg).names()}
            assert groups == cfg.groups
        meanpool = ModelConfig(**{**small_model_cfg.to_dict(), "ablation": "system1-meanpool"})
        names = build_params(meanpool).names()
        assert not any(n.startswith(("s2", "comb")) for n in names)

    def test_supported_ablations(self, small_store):
        assert supported_ablations(small_store) == list(ABLATIONS)


@pytest.fixture(scope="module")
def tiny():
    gen = GenConfig(d=16, L=4, A=8, seed=5)
    data = generate(gen, 60)
    model = ModelConfig(d=16, max_candidates=4, heads=2, s2_heads=2, ffn_mult=2)
    return data[:40], data[40:], model


class TestTrain:
    def test_one_epoch_smoke(self, tiny):
        tr, va, model = tiny
        cfg = TrainConfig(optim=OptimizerConfig(epochs=1, batch_size=8), model=model)
        res = train(tr[:10], va, cfg)
        assert [h["epoch"] for h in res.history] == [0, 1]
        assert np.isfinite(res.history[1]["losses"]["total"])

    def test_deterministic(self, tiny):
        tr, va, model = tiny
        cfg = TrainConfig(optim=OptimizerConfig(epochs=2, batch_size=8), model=model)
        a, b = train(tr, va, cfg), train(tr, va, cfg)
        for name in a.store.names():
            assert a.store[name].data.tobytes() == b.store[name].data.tobytes()
        strip = lambda h: [{k: v for k, v in e.items() if k != "seconds"} for e in h]  # noqa: E731
        assert strip(a.history) == strip(b.history)

    def test_loss_decreases(self, tiny):
        tr, va, model = tiny
        cfg = TrainConfig(optim=OptimizerConfig(epochs=5, batch_size=8, lr=1e-3), model=model)
        res = train(tr, va, cfg)
        assert res.history[5]["losses"]["total"] < res.history[1]["losses"]["total"]

    def test_meanpool_trains_only_its_parameters(self, tiny):
        tr, va, model = tiny
        m = ModelConfig(**{**model.to_dict(), "ablation": "system1-meanpool"})
        res = train(tr, va, TrainConfig(optim=OptimizerConfig(epochs=1, batch_size=8), model=m))
        assert not any(n.startswith(("s2", "comb")) for n in res.store.names())
        assert supported_ablations(res.store) == ["system1-meanpool", "no-modifier"]

    @pytest.mark.parametrize("ablation", ["no-modifier", "no-negation", "system2-only"])
    def test_ablated_models_train(self, tiny, ablation):
        tr, va, model = tiny
        m = ModelConfig(**{**model.to_dict(), "ablation": ablation})
        res = train(tr[:16], va, TrainConfig(optim=OptimizerConfig(epochs=1, batch_size=8), model=m))
        assert evaluate(va, res.store, m).ablation == ablation

    def test_dimension_mismatch(self, tiny):
        tr, va, _ = tiny
        with pytest.raises(DimensionError):
            train(tr, va, TrainConfig(model=ModelConfig(d=8, heads=2, s2_heads=2)))

    def test_empty_sets(self, tiny):
        tr, va, model = tiny
        with pytest.raises(ValueError):
            train([], va, TrainConfig(model=model))
        with pytest.raises(ValueError):
            train(tr, [], TrainConfig(model=model))


class TestEvaluate:
    def test_untrained_model_is_near_chance(self):
        data = generate(GenConfig(seed=21), 1000)
        rep = evaluate(data, build_params(ModelConfig()), ModelConfig())
        assert abs(rep.accuracy - 0.1) <= 0.03

    def test_buckets_and_report(self, tiny, small_store, small_model_cfg):
        _, va, _ = tiny
        rep = evaluate(va, small_store, small_model_cfg)
        assert sum(rep.bucket_total.values()) == rep.total == len(va)
        assert sum(rep.bucket_correct.values()) == round(rep.accuracy * rep.total)
        assert set(rep.ablation_accuracy) == set(ABLATIONS)
        assert np.array(rep.count_confusion).sum() == len(va)
        assert 0 <= rep.mean_hinged_kl <= small_model_cfg.negation_margin
        lines = rep.table().splitlines()
        assert lines[0].split() == ["Nums_of_props", "1", "2", "3", "4", "5"]
        assert lines[1].split()[:2] == ["Total", "Number"]

    def test_side_effect_free(self, tiny, small_store, small_model_cfg):
        _, va, _ = tiny
        before = small_store.state_dict()
        a = evaluate(va, small_store, small_model_cfg)
        b = evaluate(va, small_store, small_model_cfg)
        assert a == b
        for k, v in small_store.state_dict().items():
            assert np.array_equal(v, before[k])

    def test_batch_size_does_not_change_result(self, tiny, small_store, small_model_cfg):
        _, va, _ = tiny
        a = evaluate(va, small_store, small_model_cfg, batch_size=3)
        b = evaluate(va, small_store, small_model_cfg, batch_size=100)
        assert a.accuracy == b.accuracy and a.bucket_correct == b.bucket_correct

    def test_dimension_mismatch(self, small_store, small_model_cfg):
        data = generate(GenConfig(d=8, L=4, A=8), 2)
        with pytest.raises(DimensionError):
            evaluate(data, small_store, small_model_cfg)

    def test_unsupported_ablation(self, tiny, small_model_cfg):
        _, va, _ = tiny
        cfg = ModelConfig(**{**small_model_cfg.to_dict(), "ablation": "no-modifier"})
        with pytest.raises(ConfigError):
            evaluate(va, build_params(cfg), cfg, ablation="full")

    def test_empty(self, small_store, small_model_cfg):
        with pytest.raises(ValueError):
            evaluate([], small_store, small_model_cfg)


class TestTrainConfig:
    def test_round_trip_and_hash(self):
        cfg = TrainConfig(optim=OptimizerConfig(lr=1e-4), model=ModelConfig(ablation="no-negation"))
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg and back.hash() == cfg.hash()
        assert TrainConfig().hash() != cfg.hash()

    @pytest.mark.parametrize("data", [{"bogus": 1}, {"optim": {"momentum": 0.9}}, {"model": {"depth": 3}},
                                      {"loss_weights": {"other": 1.0}}])
    def test_unknown_keys(self, data):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(data)

    def test_partial_weights_merge(self):
        assert TrainConfig.from_dict({"loss_weights": {"neg": 0.0}}).loss_weights == \
            {"match": 1.0, "neg": 0.0, "uniform": 1.0, "count": 1.0}

    def test_restore(self, small_model_cfg):
        store = build_params(small_model_cfg)
        back = restore(store.state_dict(), small_model_cfg.to_dict())
        assert all(np.array_equal(back[n].data, store[n].data) for n in store.names())
        with pytest.raises(ConfigError):
            restore(store.state_dict(), {**small_model_cfg.to_dict(), "ablation": "system1-meanpool"})
