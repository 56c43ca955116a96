import logging
import math

import numpy as np
import pytest

from protonesy import episodic as epi
from protonesy.episodic import (
    EpisodeConfig,
    TrainingDiverged,
    build_bank,
    nesy_batch_loss,
    new_pnet,
    predict_concepts,
    proto_query_loss,
    sample_episode,
    sum_models,
    train,
    train_baseline,
)
from protonesy.knowledge import ONE_HOT, SUM_SPACE, TRUE, enumerate_models
from protonesy.prototypes import LABELLED, ZERO_SHOT, CentroidBank, distance_softmax
from protonesy.tasks import PairDataset, SupportIndex, even_odd_combinations, gen_synthetic


def toy_dataset(per_digit=4, d=3, n_pairs=30, seed=0):
    rng = np.random.default_rng(seed)
    digits = np.repeat(np.arange(10), per_digit)
    images = rng.standard_normal((digits.size, d))
    by_digit = {c: np.flatnonzero(digits == c) for c in range(10)}
    combos = even_odd_combinations()
    pick = rng.integers(0, len(combos), n_pairs)
    left = np.array([rng.choice(by_digit[combos[i][0]]) for i in pick])
    right = np.array([rng.choice(by_digit[combos[i][1]]) for i in pick])
    ds = PairDataset("train", images, digits, left, right, digits[left] + digits[right])
    sup = SupportIndex({c: [int(i) for i in by_digit[c]] for c in range(10)}, 10)
    return ds, sup


def bank_from(rows):
    rows = np.asarray(rows, dtype=float)
    bank = CentroidBank.empty([rows.shape[0]], [rows.shape[1]])
    for c, r in enumerate(rows):
        bank.set_centroid(0, c, r, LABELLED)
    return bank


def richardson(f, x, h=1e-4):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        def diff(step):
            e = np.zeros_like(x)
            e[i] = step
            return (f(x + e) - f(x - e)) / (2 * step)
        g[i] = (4 * diff(h / 2) - diff(h)) / 3
    return g


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-4)


class TestSampleEpisode:
    def test_all_classes_by_default(self):
        _, sup = toy_dataset()
        ep = sample_episode(sup, EpisodeConfig(support_per_class=2, query_per_class=1), 0)
        assert ep.classes == list(range(10))
        for c in range(10):
            assert len(ep.support_ids[c]) == 2 and len(ep.query_ids[c]) == 1
            assert not set(ep.support_ids[c]) & set(ep.query_ids[c])
            assert set(ep.support_ids[c]) <= set(sup.ids[c])

    def test_subset_gets_queries_only(self):
        _, sup = toy_dataset()
        ep = sample_episode(sup, EpisodeConfig(classes_per_episode=3, query_per_class=2), 5)
        assert len(ep.classes) == 3
        assert all(len(ep.support_ids[c]) == 1 for c in range(10))
        assert sum(len(v) for v in ep.query_ids.values()) == 6
        assert all(not ep.query_ids[c] for c in range(10) if c not in ep.classes)

    def test_singleton_class(self, caplog):
        sup = SupportIndex({0: [3], 1: [4, 5, 6]}, 10)
        with caplog.at_level(logging.INFO, logger="protonesy.episodic"):
            ep = sample_episode(sup, EpisodeConfig(support_per_class=2, query_per_class=1), 0)
        assert ep.support_ids[0] == [3] and ep.query_ids[0] == []
        assert "fewer than 2" in caplog.text

    def test_deterministic(self):
        _, sup = toy_dataset()
        cfg = EpisodeConfig(classes_per_episode=4, support_per_class=2, query_per_class=1)
        a, b = sample_episode(sup, cfg, [3, 1]), sample_episode(sup, cfg, [3, 1])
        assert (a.classes, a.support_ids, a.query_ids) == (b.classes, b.support_ids, b.query_ids)
        c = sample_episode(sup, cfg, [3, 2])
        assert (a.classes, a.support_ids) != (c.classes, c.support_ids)

    def test_too_many_classes(self):
        sup = SupportIndex({0: [1], 1: [2]}, 10)
        with pytest.raises(ValueError):
            sample_episode(sup, EpisodeConfig(classes_per_episode=3), 0)


class TestProtoQueryLoss:
    def test_on_centroid(self):
        bank = bank_from([[0, 0], [10, 0], [0, 10]])
        loss, _, _ = proto_query_loss([0, 0], bank, 0, 0)
        assert loss < 1e-8

    def test_equidistant(self):
        angles = np.linspace(0, 2 * np.pi, 10, endpoint=False)
        bank = bank_from(np.stack([np.cos(angles), np.sin(angles)], axis=1))
        loss, gz, _ = proto_query_loss([0, 0], bank, 0, 4)
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_is_negative_log_probability(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            bank = bank_from(rng.standard_normal((6, 4)))
            z = rng.standard_normal(4)
            t = int(rng.integers(6))
            loss, _, _ = proto_query_loss(z, bank, 0, t)
            assert abs(loss + math.log(distance_softmax(z, bank, 0)[t])) < 1e-10

    def test_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            cents = rng.standard_normal((5, 3))
            z = rng.standard_normal(3)
            loss, gz, gc = proto_query_loss(z, bank_from(cents), 0, 2)
            assert rel(gz, richardson(lambda v: proto_query_loss(v, bank_from(cents), 0, 2)[0], z)) < 1e-8
            assert rel(gc, richardson(lambda c: proto_query_loss(z, bank_from(c), 0, 2)[0], cents)) < 1e-8

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        cents = rng.standard_normal((4, 3))
        zs, truth = rng.standard_normal((6, 3)), rng.integers(0, 4, 6)
        losses, gz, gc = epi._proto_batch(zs, cents, truth)
        total = np.zeros_like(cents)
        for i in range(6):
            l, a, b = proto_query_loss(zs[i], bank_from(cents), 0, int(truth[i]))
            assert losses[i] == pytest.approx(l, abs=1e-12)
            np.testing.assert_allclose(gz[i], a, atol=1e-12)
            total += b
        np.testing.assert_allclose(gc, total, atol=1e-12)


def tiny_model(seed=0, d=3, embed=3, hidden=(4,)):
    cfg = EpisodeConfig(embed_dim=embed, hidden=hidden, seed=seed)
    return new_pnet(d, cfg), cfg


def flat(params):
    return np.concatenate([a.ravel() for a in params.weights + params.biases])


def unflat(template, vec):
    out, pos = template.copy(), 0
    for arr in out.weights + out.biases:
        arr[...] = vec[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return out


def grads_flat(grads):
    return np.concatenate([a.ravel() for a in grads.weights + grads.biases])


class TestNesyBatchLoss:
    def setup_method(self):
        self.ds, self.sup = toy_dataset()
        self.model, self.cfg = tiny_model()
        self.bank, _ = build_bank(self.model, self.ds, [self.sup], [self.sup.ids], 0.99, (0, 0))
        self.idx = np.arange(8)

    def test_every_one_hot_model(self):
        # WMC over all one-hot worlds factorises per group
        everything = enumerate_models(TRUE, SUM_SPACE, ONE_HOT)
        res = nesy_batch_loss(self.ds, self.idx, self.model, self.bank, lambda y: everything)
        expected = 0.0
        for g, ids in enumerate((self.ds.left, self.ds.right)):
            z, _ = self.model.embed(0, self.ds.images[ids[self.idx]])
            y = distance_softmax(z, self.bank, 0)
            per = np.array([[yi[c] * np.prod(np.delete(1 - yi, c)) for c in range(10)] for yi in y])
            expected -= np.log(per.sum(axis=1)).mean()
        assert res.loss == pytest.approx(expected, abs=1e-12)

    def test_label_zero_direct(self):
        ds = PairDataset("t", self.ds.images, self.ds.digits, np.array([0]), np.array([1]), np.array([0]))
        res = nesy_batch_loss(ds, np.array([0]), self.model, self.bank)
        y = [distance_softmax(self.model.embed(0, self.ds.images[i])[0], self.bank, 0) for i in (0, 1)]
        direct = -sum(math.log(v[0]) + np.sum(np.log(1 - v[1:])) for v in y)
        assert res.loss == pytest.approx(direct, abs=1e-12)

    def test_composed_finite_differences(self):
        start = flat(self.model.params[0])

        def loss(vec, cents=None):
            model = epi.PNetModel(self.model.specs, [unflat(self.model.params[0], vec)], (0, 0))
            bank = self.bank if cents is None else bank_from(cents)
            return nesy_batch_loss(self.ds, self.idx, model, bank).loss

        res = nesy_batch_loss(self.ds, self.idx, self.model, self.bank, scale=1.0)
        assert rel(grads_flat(res.param_grads[0]), richardson(loss, start)) < 1e-4
        cents = self.bank.centroids[0]
        assert rel(res.centroid_grads[0], richardson(lambda c: loss(start, c), cents)) < 1e-4

    def test_scale(self):
        a = nesy_batch_loss(self.ds, self.idx, self.model, self.bank, scale=1.0)
        b = nesy_batch_loss(self.ds, self.idx, self.model, self.bank, scale=2.5)
        assert a.loss == b.loss
        np.testing.assert_allclose(grads_flat(b.param_grads[0]), 2.5 * grads_flat(a.param_grads[0]), rtol=1e-13)


class TestEpisodeGradient:
    def test_whole_episode_matches_finite_differences(self, monkeypatch):
        # gradients handed to the optimizer equal the derivative of the reported episode loss
        ds, sup = toy_dataset()
        cfg = EpisodeConfig(embed_dim=3, hidden=(4,), support_per_class=2, query_per_class=1,
                            batch_size=6, w_sl=2.0, seed=3)
        model = new_pnet(3, cfg)
        captured = []
        monkeypatch.setattr(epi.bb, "adam_step", lambda p, g, *a, **k: captured.append(g) or p)

        def episode_loss(vec):
            m = epi.PNetModel(model.specs, [unflat(model.params[0], vec)], (0, 0))
            stream = epi._RoundRobin(len(ds), np.random.SeedSequence([cfg.seed, 7]))
            return epi._pnet_episode(m, ds, [sup], cfg, sum_models, stream, 0, cfg.lr).combined

        start = flat(model.params[0])
        episode_loss(start)
        analytic = grads_flat(captured[0])
        assert rel(analytic, richardson(episode_loss, start)) < 1e-4


def trained(cfg, knowledge=sum_models, data_seed=0):
    ds, sup = toy_dataset(seed=data_seed)
    return train(ds, sup, cfg, knowledge), ds


class TestTrain:
    def small_cfg(self, **kw):
        base = dict(epochs=2, episodes_per_epoch=3, batch_size=8, embed_dim=4, hidden=(8,),
                    support_per_class=2, query_per_class=1, seed=1)
        base.update(kw)
        return EpisodeConfig(**base)

    def test_zero_epochs(self):
        cfg = self.small_cfg(epochs=0)
        res, _ = trained(cfg)
        fresh = new_pnet(3, cfg)
        assert res.epochs == []
        for a, b in zip(res.model.params[0].weights, fresh.params[0].weights):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self):
        a, _ = trained(self.small_cfg())
        b, _ = trained(self.small_cfg())
        assert a.epochs == b.epochs
        for x, y in zip(a.model.params[0].weights, b.model.params[0].weights):
            assert x.tobytes() == y.tobytes()
        for x, y in zip(a.model.bank.centroids, b.model.bank.centroids):
            assert x.tobytes() == y.tobytes()

    def test_seed_changes_result(self):
        a, _ = trained(self.small_cfg())
        b, _ = trained(self.small_cfg(seed=2))
        assert not np.array_equal(a.model.params[0].weights[0], b.model.params[0].weights[0])

    def test_no_semantic_weight_ignores_knowledge(self):
        everything = enumerate_models(TRUE, SUM_SPACE, ONE_HOT)
        a, _ = trained(self.small_cfg(w_sl=0.0))
        b, _ = trained(self.small_cfg(w_sl=0.0), knowledge=lambda y: everything)
        for x, y in zip(a.model.bank.centroids, b.model.bank.centroids):
            assert x.tobytes() == y.tobytes()
        assert a.epochs[0]["nesy_loss"] != b.epochs[0]["nesy_loss"]

    def test_separate_extractors(self):
        res, ds = trained(self.small_cfg(shared_extractor=False))
        assert len(res.model.params) == 2 and res.model.group_extractor == (0, 1)
        assert predict_concepts(res.model, ds).shape == (len(ds), 2)

    def test_zero_shot_classes(self):
        ds, sup = toy_dataset()
        partial = SupportIndex({c: sup.ids[c] for c in range(6)}, 10)
        res = train(ds, partial, self.small_cfg())
        assert res.model.bank.status[0][:6] == [LABELLED] * 6
        assert res.model.bank.status[0][6:] == [ZERO_SHOT] * 4
        assert np.all(np.isfinite(res.model.bank.centroids[0]))

    def test_divergence_aborts(self):
        ds, sup = toy_dataset()
        ds.images[0, 0] = np.nan
        bad = SupportIndex({0: [0], 1: sup.ids[1]}, 10)
        with pytest.raises(TrainingDiverged):
            train(ds, bad, self.small_cfg())

    def test_epoch_records(self):
        ds, sup = toy_dataset()
        res = train(ds, sup, self.small_cfg(), val=ds)
        assert [r["epoch"] for r in res.epochs] == [0, 1]
        assert {"proto_loss", "nesy_loss", "combined", "val_acc_c", "val_f1_c"} <= res.epochs[0].keys()
        r = res.epochs[1]
        assert r["combined"] == pytest.approx(r["proto_loss"] + 10.0 * r["nesy_loss"])

    def test_learns_separable_synthetic(self):
        task = gen_synthetic(d=10, separation=8.0, sizes=(400, 50, 200), seed=0)
        ds = task.splits["train"]
        sup = SupportIndex({c: [int(np.flatnonzero(ds.digits == c)[0])] for c in range(10)}, 10)
        cfg = EpisodeConfig(epochs=3, episodes_per_epoch=30, embed_dim=10, hidden=(32,), lr=1e-2, seed=0)
        res = train(ds, sup, cfg)
        test = task.splits["test"]
        assert np.mean(predict_concepts(res.model, test) == test.concepts) > 0.9


class TestBaseline:
    def test_runs_and_predicts(self):
        ds, _ = toy_dataset()
        cfg = EpisodeConfig(epochs=2, episodes_per_epoch=5, batch_size=8, hidden=(8,), seed=0)
        res = train_baseline(ds, cfg)
        assert len(res.epochs) == 2 and res.epochs[0]["proto_loss"] == 0.0
        assert predict_concepts(res.model, ds).shape == (len(ds), 2)

    def test_gradient_matches_finite_differences(self):
        ds, _ = toy_dataset()
        cfg = EpisodeConfig(hidden=(4,), seed=2)
        model = epi.new_baseline(3, cfg)
        idx = np.arange(6)
        _, grads = epi._baseline_step(model, ds, idx, sum_models, 1.0)
        start = flat(model.params)

        def loss(vec):
            m = epi.BaselineModel(model.spec, unflat(model.params, vec))
            return epi._baseline_step(m, ds, idx, sum_models, 1.0)[0]

        assert rel(grads_flat(grads), richardson(loss, start)) < 1e-4

    def test_no_weight_falls_back_to_one(self):
        ds, _ = toy_dataset()
        cfg = EpisodeConfig(epochs=1, episodes_per_epoch=2, batch_size=8, hidden=(8,), w_sl=0.0)
        rec = train_baseline(ds, cfg).epochs[0]
        assert rec["combined"] == pytest.approx(rec["nesy_loss"])


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(support_per_class=0), dict(p=1.0), dict(lr=0.0),
                                    dict(batch_size=0), dict(query_per_class=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EpisodeConfig(**kw)
