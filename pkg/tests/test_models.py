import math

import numpy as np
import pytest

from rankattr import diffcore as dc
from rankattr import models as M
from rankattr import pertmetrics as pm
from rankattr import softobjective as so
from rankattr import synthdata as sd


@pytest.fixture(scope="module")
def tiny():
    X, y, _ = sd.stack(sd.generate(sd.DatasetConfig(samples_per_class=128, seed=0)))
    clf = M.train_classifier(X, y, M.ClassifierConfig(seed=0), num_classes=4)
    return X, y, clf


def map_objective(A, f, I, t, rc):
    """Refinement loss of a given map (the loss depends on the parameters only through A)."""
    grid, ks, soft, refs = M.refinement_setup(rc, *I.shape, I)
    w = so.LossWeights(rc.lambda_del, rc.lambda_ins, rc.lambda_reg)
    loss, _ = so.objective(f, A[None], I[None], [r[None] for r in refs], [t], grid, ks, soft, w)
    return float(loss.data)


class TestClassifier:
    def test_probabilities(self):
        clf = M.Classifier(4, 4, 3, hidden=8, seed=1)
        x = np.random.default_rng(0).uniform(size=(5, 4, 4))
        p = clf.predict_proba(x)
        assert p.shape == (5, 3)
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
        np.testing.assert_allclose(clf.forward(x).data, p, atol=1e-15)

    def test_separable_two_class(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(0.0, 1.0, (200, 4, 4))
        y = (X[:, :2].mean(axis=(1, 2)) > X[:, 2:].mean(axis=(1, 2))).astype(int)
        X[y == 1, :2] += 0.3
        X[y == 0, 2:] += 0.3
        clf = M.train_classifier(X, y, M.ClassifierConfig(epochs=20, seed=0))
        assert (clf.predict(X) == y).mean() >= 0.99

    def test_desk_accuracy(self, tiny):
        X, y, clf = tiny
        assert (clf.predict(X) == y).mean() >= 0.95

    def test_deterministic(self, tiny):
        X, y, _ = tiny
        a = M.train_classifier(X, y, M.ClassifierConfig(epochs=2, seed=3))
        b = M.train_classifier(X, y, M.ClassifierConfig(epochs=2, seed=3))
        assert M.checkpoint_bytes(a) == M.checkpoint_bytes(b)

    def test_zero_epochs_is_init(self, tiny):
        X, y, _ = tiny
        a = M.train_classifier(X, y, M.ClassifierConfig(epochs=0, seed=4))
        b = M.Classifier(16, 16, 4, seed=np.random.SeedSequence(4).spawn(2)[0])
        assert a == b

    def test_frozen_after_training(self, tiny):
        assert not any(p.requires_grad for p in tiny[2].parameters())

    def test_shape_error(self):
        with pytest.raises(dc.ShapeError):
            M.Classifier(4, 4, 2).predict_proba(np.zeros((1, 3, 3)))


class TestExplain:
    def test_shape_and_determinism(self, tiny):
        X, _, clf = tiny
        e = M.Explainer(16, 16, 4, seed=0)
        a, b = M.explain(e, X[0], 1), M.explain(e, X[0], 1)
        assert a.shape == (16, 16)
        assert a.tobytes() == b.tobytes()
        assert M.explain(e, X[:3], [0, 1, 2]).shape == (3, 16, 16)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            M.explain(M.Explainer(4, 4, 2), np.zeros((4, 4)), 2)

    def test_targets_differ_on_two_object_image(self, desk):
        img = np.full((16, 16), 0.5)
        img[1:5, 1:5] = 1.0  # class 0 glyph
        img[10:14, 10:14] = 0.2  # class 2 glyph
        a0, a2 = M.explain(desk.expl, img, 0), M.explain(desk.expl, img, 2)
        assert np.abs(a0 - a2).max() > 0

    def test_no_mutation(self, tiny):
        e = M.Explainer(16, 16, 4, seed=1)
        before = M.checkpoint_bytes(e)
        M.explain(e, tiny[0][:2], [0, 1])
        assert M.checkpoint_bytes(e) == before


class TestOptimiser:
    def test_adamw_matches_hand_formula(self):
        p = dc.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = M.AdamW([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
        g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
        x = p.data.copy()
        m = v = np.zeros(2)
        for t, g in enumerate((g1, g2), start=1):
            p.grad = g
            opt.step()
            x = x * (1 - 0.1 * 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-12)

    def test_clip(self):
        a, b = dc.Tensor(np.zeros(2)), dc.Tensor(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert M.clip_grad_norm([a, b], 1.0) == 5.0
        assert math.hypot(*a.grad, *b.grad) == pytest.approx(1.0, abs=1e-6)
        a.grad = np.array([0.1, 0.0])
        b.grad = np.array([0.0])
        M.clip_grad_norm([a, b], 1.0)
        np.testing.assert_array_equal(a.grad, [0.1, 0.0])

    def test_schedules(self):
        assert M.cosine_lr(1.0, 0, 10) == 1.0
        assert M.cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
        assert M.tau_schedule(10, 1, 0, 11) == 10
        assert M.tau_schedule(10, 1, 10, 11) == pytest.approx(1.0)
        assert M.tau_schedule(10, 1, 5, 11) == pytest.approx(math.sqrt(10))


class TestTrainExplainer:
    def test_seeded_reproducibility(self, tiny):
        X, _, clf = tiny
        cfg = M.TrainConfig(seed=2)
        h1, h2 = [], []
        e1 = M.train_explainer(clf, X[:64], cfg, history=h1)
        e2 = M.train_explainer(clf, X[:64], cfg, history=h2)
        assert h1[-1]["loss"] == h2[-1]["loss"]
        assert e1 == e2
        assert [h["ref"] for h in h1[:4]] == ["black", "mean", "blur", "black"]

    def test_classifier_untouched(self, tiny):
        X, _, clf = tiny
        before = M.checkpoint_bytes(clf)
        M.train_explainer(clf, X[:32], M.TrainConfig(seed=3))
        assert M.checkpoint_bytes(clf) == before

    def test_trainable_classifier_rejected(self, tiny):
        X, _, clf = tiny
        live = clf.clone()
        live.set_trainable(True)
        with pytest.raises(AssertionError):
            M.train_explainer(live, X[:16], M.TrainConfig())

    def test_smoothing_only_run(self, tiny):
        X, _, clf = tiny
        t = clf.predict(X)
        kw = dict(lambda_del=0.0, lambda_ins=0.0, lambda_reg=2.5e-3, seed=0)
        e0 = M.train_explainer(clf, X, M.TrainConfig(epochs=0, **kw))
        e1 = M.train_explainer(clf, X, M.TrainConfig(epochs=4, **kw))
        p0 = float(so.smoothness_penalty(M.explain(e0, X, t)).data)
        p1 = float(so.smoothness_penalty(M.explain(e1, X, t)).data)
        assert p0 / p1 >= 10

    def test_config_validation(self):
        with pytest.raises(ValueError):
            M.TrainConfig(tau_start=0.5, tau_final=1.0).validate()
        with pytest.raises(ValueError):
            M.TrainConfig(lr=0).validate()
        with pytest.raises(ValueError):
            M.TrainConfig(lambda_del=0, lambda_ins=0, lambda_reg=0).validate()


class TestRefine:
    def test_zero_steps_is_explain(self, tiny):
        X, _, clf = tiny
        e = M.Explainer(16, 16, 4, seed=5)
        A = M.refine(e, clf, X[0], 1, M.RefineConfig(T=0))
        assert A.tobytes() == M.explain(e, X[0], 1).tobytes()

    def test_isolation(self, tiny):
        X, _, clf = tiny
        e = M.Explainer(16, 16, 4, seed=6)
        e_before, f_before = M.checkpoint_bytes(e), M.checkpoint_bytes(clf)
        A = M.refine(e, clf, X[0], 2, M.RefineConfig(T=2))
        assert M.checkpoint_bytes(e) == e_before
        assert M.checkpoint_bytes(clf) == f_before
        assert not np.array_equal(A, M.explain(e, X[0], 2))

    def test_deterministic(self, tiny):
        X, _, clf = tiny
        e = M.Explainer(16, 16, 4, seed=7)
        rc = M.RefineConfig(T=2)
        assert M.refine(e, clf, X[1], 0, rc).tobytes() == M.refine(e, clf, X[1], 0, rc).tobytes()

    def test_freeze_first_layer(self, tiny):
        X, _, clf = tiny
        e = M.Explainer(16, 16, 4, seed=8)
        a = M.refine(e, clf, X[2], 0, M.RefineConfig(T=1, freeze_first_layer=True))
        b = M.refine(e, clf, X[2], 0, M.RefineConfig(T=1))
        assert not np.array_equal(a, b)

    def test_negative_steps(self, tiny):
        with pytest.raises(ValueError):
            M.refine(M.Explainer(16, 16, 4), tiny[2], tiny[0][0], 0, M.RefineConfig(T=-1))

    def test_objective_helper_matches_map(self, tiny):
        X, _, clf = tiny
        e = M.Explainer(16, 16, 4, seed=9)
        rc = M.RefineConfig()
        assert M.refinement_objective(e, clf, X[3], 1, rc) == map_objective(M.explain(e, X[3], 1), clf, X[3], 1, rc)

    @pytest.mark.slow
    def test_objective_trend_on_fixture_set(self, desk):
        X = desk.test[0][:32]
        ts = desk.clf.predict(X)
        rc = M.RefineConfig(dataset_mean=desk.dataset_mean)
        means = []
        for T in range(4):
            vals = [
                map_objective(M.refine(desk.expl, desk.clf, I, int(t), M.RefineConfig(T=T, dataset_mean=desk.dataset_mean)), desk.clf, I, int(t), rc)
                for I, t in zip(X, ts)
            ]
            means.append(math.fsum(vals) / len(vals))
        assert all(b <= a for a, b in zip(means, means[1:])), means


class TestCheckpoint:
    def test_round_trip(self, tiny, tmp_path):
        _, _, clf = tiny
        e = M.Explainer(16, 16, 4, seed=10)
        e.meta = {"dataset_mean": 0.51}
        for model in (clf, e):
            p = tmp_path / f"{model.kind}.ck"
            M.save_checkpoint(model, p)
            back = M.load_checkpoint(p)
            assert type(back) is type(model) and back == model
            assert back.meta == model.meta
            assert M.checkpoint_bytes(back) == p.read_bytes()

    def test_corruption(self, tiny, tmp_path):
        p = tmp_path / "c.ck"
        M.save_checkpoint(tiny[2], p)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(M.CheckpointError):
            M.load_checkpoint(p)
        flipped = bytearray(raw)
        flipped[200] ^= 1
        p.write_bytes(bytes(flipped))
        with pytest.raises(M.CheckpointError):
            M.load_checkpoint(p)
        p.write_bytes(b"nope" + raw[4:])
        with pytest.raises(M.CheckpointError):
            M.load_checkpoint(p)


class TestFixtureQuality:
    def test_trained_beats_random_maps(self, desk):
        X, _, _ = desk.test
        ts = desk.clf.predict(X[:8])
        rng = np.random.default_rng(0)
        ours, rand = [], []
        for I, t in zip(X[:8], ts):
            I0 = pm.make_reference(I, "black")
            ours.append(pm.insertion_auc(desk.clf, M.explain(desk.expl, I, t), I, I0, t, step_stride=4))
            rand.append(np.mean([pm.insertion_auc(desk.clf, rng.normal(size=(16, 16)), I, I0, t, step_stride=4) for _ in range(8)]))
        assert np.mean(ours) > np.mean(rand)
