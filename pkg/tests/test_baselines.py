import numpy as np
import pytest

from helpers import corrupted_instances
from softvqa import autodiff as ad
from softvqa.baselines import (Correction, LabelDistribution, ReinforceState, _reward, abduce, abduction_step,
                               apply_corrections, correction_loss, label_distributions, predict_symbolic,
                               reinforce_step, single_flip_fixes, train_abduction, train_reinforce)
from softvqa.data import DatasetConfig, build_dataset
from softvqa.model import ModelConfig, SoftVQAModel, evaluate_predictions
from softvqa.perception import PerceptionOutput, oracle_perception
from softvqa.symbolic import Answer, SceneLabels
from softvqa.training import TrainConfig


@pytest.fixture(scope="module")
def ds():
    return build_dataset(DatasetConfig(num_scenes=40, questions_per_scene=5, seed=21, sup_percent=10))


def fresh_model(ds):
    return SoftVQAModel(ModelConfig(seed=0), ds.schema, len(ds.vocab))


def oracle_model(ds, requires_grad=False):
    m = fresh_model(ds)

    def perceive(batch):
        p = oracle_perception(batch.scenes, ds.schema, m.config.max_objects)
        attrs = {f: ad.tensor(v.data, requires_grad=requires_grad) for f, v in p.attrs.items()}
        return PerceptionOutput(attrs, ad.tensor(p.relations.data, requires_grad=requires_grad))

    m.perceive = perceive
    return m


def two_object_labels():
    # object 0: red cube rubber small; object 1: blue sphere metal large; 1 is right of 0
    attrs = {"color": np.array([1, 2]), "shape": np.array([0, 1]), "material": np.array([0, 1]),
             "size": np.array([0, 1])}
    rel = np.zeros((2, 2, 4), dtype=bool)
    rel[0, 1, 1] = True  # right
    rel[1, 0, 0] = True  # left
    return SceneLabels(attrs, rel)


def peaked(labels, schema, p=0.9):
    attrs = {}
    for f in schema.family_names:
        K = schema.cardinality(f)
        a = np.full((labels.n, K), (1 - p) / (K - 1))
        a[np.arange(labels.n), labels.attrs[f]] = p
        attrs[f] = a
    rel = np.where(labels.relations, p, 1 - p).astype(float)
    rel[np.arange(labels.n), np.arange(labels.n)] = 0.0
    return LabelDistribution(attrs, rel)


class TestLabelDistribution:
    def test_argmax_and_ties(self, schema):
        d = LabelDistribution({"color": np.full((3, 8), 1 / 8)}, np.full((3, 3, 1), 0.5))
        assert np.all(d.argmax().attrs["color"] == 0)
        draws = {int(d.argmax(np.random.default_rng(s)).attrs["color"][0]) for s in range(40)}
        assert len(draws) > 3
        assert not d.argmax(np.random.default_rng(0)).relations[np.arange(3), np.arange(3)].any()

    def test_sampling_follows_probabilities(self):
        p = np.array([[0.7, 0.3]])
        d = LabelDistribution({"size": p}, np.zeros((1, 1, 1)))
        rng = np.random.default_rng(0)
        draws = [d.sample(rng).attrs["size"][0] for _ in range(4000)]
        assert np.mean(draws) == pytest.approx(0.3, abs=0.03)

    def test_from_perception_drops_dead_objects(self, ds):
        m = fresh_model(ds)
        qs = ds.train[:2]
        b = m.encode(ds, qs)
        with ad.no_grad():
            dists = label_distributions(m.perceive(b), b.scenes)
        assert [d.n for d in dists] == [s.n for s in b.scenes]


class TestSymbolicPrediction:
    def test_oracle_perception_answers_everything(self, ds):
        m = oracle_model(ds)
        res = evaluate_predictions(ds.val, lambda chunk: predict_symbolic(m, ds, chunk))
        assert res["accuracy"] == 1.0

    def test_fault_reward_is_zero(self, catalog):
        labels = two_object_labels()
        assert _reward((("count", None),), labels, Answer("count", 0), catalog) == 0.0
        prog = (("scene", None), ("unique", None), ("query_color", None))
        assert _reward(prog, labels, Answer("color", "red"), catalog, strict=True) == 0.0


class TestReinforce:
    def test_all_correct_with_unit_baseline_gives_zero_update(self, ds):
        m = oracle_model(ds, requires_grad=True)
        state = ReinforceState(baseline=1.0)
        loss, r = reinforce_step(m, ds, ds.train[:8], state, np.random.default_rng(0))
        assert r == 1.0 and float(loss.data) == 0.0
        assert not loss.requires_grad
        assert state.baseline == 1.0

    def test_one_hot_policy_reward_is_one(self, ds):
        m = oracle_model(ds)
        rng = np.random.default_rng(3)
        for _ in range(3):
            _, r = reinforce_step(m, ds, ds.train[:16], ReinforceState(), rng)
            assert r == 1.0

    def test_baseline_is_an_ema(self, ds):
        m = oracle_model(ds)
        state = ReinforceState(baseline=0.0, decay=0.5)
        reinforce_step(m, ds, ds.train[:2], state, np.random.default_rng(0))
        assert state.baseline == pytest.approx(0.75)  # 0 -> 0.5 -> 0.75

    def test_gradient_is_advantage_times_score(self, ds):
        m = fresh_model(ds)
        qs = ds.train[:4]
        state = ReinforceState(baseline=0.25)
        m.store.zero_grad()
        loss, r = reinforce_step(m, ds, qs, state, np.random.default_rng(5))
        assert np.isfinite(float(loss.data))
        if loss.requires_grad:
            loss.backward()
            assert all(m.store[n].grad is None for n in m.store.names("text."))


class TestAbduction:
    def test_already_correct_returns_none_tier(self, catalog, schema):
        labels = two_object_labels()
        prog = (("scene", None), ("filter_color", "red"), ("count", None))
        lab, corr, tier = abduce(prog, Answer("count", 1), peaked(labels, schema), catalog, np.random.default_rng(0))
        assert tier == "none" and corr == []
        np.testing.assert_array_equal(lab.attrs["color"], labels.attrs["color"])

    def test_single_corrupted_color_is_flipped_back(self, catalog, schema):
        labels = two_object_labels()
        bad = labels.copy()
        bad.attrs["color"][1] = 1  # blue sphere mislabelled red
        prog = (("scene", None), ("filter_color", "red"), ("count", None))
        answer = Answer("count", 1)
        fixes = single_flip_fixes(prog, answer, bad, catalog)
        assert ("color", 1, 2) in fixes
        dist = peaked(bad, schema)
        dist.attrs["color"][1, 2] = 0.09  # the true value is the runner-up
        lab, corr, tier = abduce(prog, answer, dist, catalog, np.random.default_rng(0))
        assert tier == "greedy" and len(corr) == 1
        c = corr[0]
        assert (c.family, c.obj) == ("color", 1) and c.new_label != 1
        assert c.cost == pytest.approx(-np.log(dist.attrs["color"][1, c.new_label]))

    def test_relation_flip(self, catalog, schema):
        labels = two_object_labels()
        bad = labels.copy()
        bad.relations[0, 1, 1] = False
        prog = (("scene", None), ("filter_shape", "cube"), ("unique", None), ("relate", "right"), ("count", None))
        lab, corr, tier = abduce(prog, Answer("count", 1), peaked(bad, schema), catalog, np.random.default_rng(0))
        assert tier == "greedy" and corr[0].family == "relation:right" and (corr[0].obj, corr[0].target) == (0, 1)
        assert lab.relations[0, 1, 1]

    def test_soundness_on_corrupted_instances(self, catalog):
        rng = np.random.default_rng(1)
        for prog, ans, truth, dist in corrupted_instances(rng, 60, catalog):
            res = abduce(prog, ans, dist, catalog, rng)
            if res is None:
                continue
            lab, corr, tier = res
            assert _reward(prog, lab, ans, catalog, strict=True) == 1.0
            if tier == "greedy":
                assert len(corr) == 1

    def test_budget_exhaustion_returns_none(self, catalog, schema):
        labels = two_object_labels()
        prog = (("scene", None), ("count", None))
        # no label change can turn two objects into five
        assert abduce(prog, Answer("count", 5), peaked(labels, schema), catalog, np.random.default_rng(0), 4) is None

    def test_apply_and_loss(self, schema, ds):
        labels = two_object_labels()
        c = Correction(0, 1, "size", 0, 0.1)
        assert apply_corrections(labels, [c], schema).attrs["size"][1] == 0
        assert labels.attrs["size"][1] == 1  # original untouched
        m = fresh_model(ds)
        b = m.encode(ds, ds.train[:1])
        perc = m.perceive(b)
        loss, k = correction_loss(perc, 0, [c], schema, 1e-6)
        assert k == 1 and float(loss.data) == pytest.approx(np.log(2))  # uniform untrained size head

    def test_step_reports_tier_fractions(self, ds):
        m = fresh_model(ds)
        loss, info = abduction_step(m, ds, ds.train[:8], np.random.default_rng(0), budget=4)
        assert sum(info.values()) == pytest.approx(1.0)
        assert set(info) == {"frac_none", "frac_greedy", "frac_sampled", "frac_failed"}


class TestTrainers:
    def _cfg(self):
        return TrainConfig(lr=1e-2, max_samples=64, batch_size=16, eval_interval=2, eval_samples=30)

    def test_reinforce_deterministic_and_vision_only(self, ds):
        m1, m2 = fresh_model(ds), fresh_model(ds)
        text = {n: m1.store[n].data.copy() for n in m1.store.names("text.")}
        r1, r2 = train_reinforce(m1, ds, self._cfg()), train_reinforce(m2, ds, self._cfg())
        assert r1.records == r2.records and r1.method == "reinforce"
        for n, v in text.items():
            np.testing.assert_array_equal(m1.store[n].data, v)

    def test_abduction_improves_from_scratch(self, ds):
        m = fresh_model(ds)
        cfg = TrainConfig(lr=1e-2, max_samples=1600, batch_size=32, eval_interval=25, eval_samples=100)
        r = train_abduction(m, ds, cfg)
        assert r.method == "abduction"
        assert r.final_accuracy > r.records[0]["accuracy"]
