import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import monotone_evidence_fixture
from rankattr import diffcore as dc
from rankattr import pertmetrics as pm
from rankattr import softobjective as so
from rankattr import softperm as sp

NO_GUMBEL = dict(gumbel_enabled=False)


def pool_oracle(A, G):
    H, W = A.shape
    return A.reshape(G, H // G, G, W // G).mean(axis=(1, 3)).reshape(-1)


class TestGrid:
    def test_validate(self):
        so.GridSpec(4, 3, 3).validate(16, 16)
        with pytest.raises(ValueError):
            so.GridSpec(3).validate(16, 16)
        with pytest.raises(ValueError):
            so.GridSpec(4, 4, 0).validate(16, 16)
        with pytest.raises(ValueError):
            so.GridSpec(32).validate(16, 16)

    def test_admissible(self):
        assert so.admissible_grids(2, 16, 16, 16) == [2, 4, 8, 16]
        assert so.admissible_grids(3, 3, 16, 16) == []


class TestPooling:
    def test_quadrants(self):
        A = np.kron(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2)))
        np.testing.assert_array_equal(so.region_pool(A, so.GridSpec(2)).data, [1, 2, 3, 4])

    def test_identity_partition(self):
        A = np.random.default_rng(0).normal(size=(4, 4))
        np.testing.assert_array_equal(so.region_pool(A, so.GridSpec(4)).data, A.reshape(-1))

    @pytest.mark.parametrize("G,dy,dx", [(2, 1, 1), (2, 3, 2), (4, 1, 0), (4, 1, 1)])
    def test_shift_matches_roll(self, G, dy, dx):
        A = np.arange(64, dtype=float).reshape(8, 8) ** 1.5
        rolled = np.roll(A, (dy, dx), axis=(0, 1))  # pixel y sits in block (y + dy) mod H
        np.testing.assert_allclose(so.region_pool(A, so.GridSpec(G, dy, dx)).data, pool_oracle(rolled, G), rtol=1e-14)

    def test_ramp_4x4(self):
        A = np.arange(16, dtype=float).reshape(4, 4)
        got = so.region_pool(A, so.GridSpec(2, 1, 1)).data
        np.testing.assert_allclose(got, pool_oracle(np.roll(A, (1, 1), axis=(0, 1)), 2))

    def test_batched(self):
        A = np.random.default_rng(1).normal(size=(3, 8, 8))
        got = so.region_pool(A, so.GridSpec(4, 1, 0)).data
        for b in range(3):
            np.testing.assert_allclose(got[b], so.region_pool(A[b], so.GridSpec(4, 1, 0)).data)


class TestUpsample:
    def test_ones(self):
        np.testing.assert_array_equal(so.upsample_mask(np.ones(4), so.GridSpec(2, 1, 1), 8, 8).data, np.ones((8, 8)))

    def test_identity_partition(self):
        m = np.arange(16.0)
        np.testing.assert_array_equal(so.upsample_mask(m, so.GridSpec(4), 4, 4).data, m.reshape(4, 4))

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([1, 2, 4, 8, 16]), st.integers(0, 15), st.integers(0, 15), st.integers(0, 999))
    def test_round_trip(self, G, dy, dx, seed):
        grid = so.GridSpec(G, dy % (16 // G), dx % (16 // G))
        m = np.random.default_rng(seed).normal(size=grid.K)
        back = so.region_pool(so.upsample_mask(m, grid, 16, 16), grid).data
        np.testing.assert_allclose(back, m, atol=1e-13)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            so.upsample_mask(np.ones(3), so.GridSpec(2), 4, 4)


class TestSteps:
    def test_full(self):
        np.testing.assert_array_equal(so.sample_steps(9, 9, np.random.default_rng(0)), np.arange(1, 10))

    def test_single(self):
        np.testing.assert_array_equal(so.sample_steps(10, 1, jitter=False), [10])

    def test_even(self):
        np.testing.assert_array_equal(so.sample_steps(64, 16, jitter=False), np.arange(4, 65, 4))

    def test_jitter_properties(self):
        rng = np.random.default_rng(1)
        seen = set()
        for _ in range(200):
            ks = so.sample_steps(64, 16, rng)
            assert ks[-1] == 64 and ks[0] >= 1
            assert (np.diff(ks) > 0).all()
            assert len(ks) == 16
            seen.add(int(ks[0]))
        assert seen == {2, 3, 4, 5, 6}

    def test_errors(self):
        with pytest.raises(ValueError):
            so.sample_steps(4, 5, jitter=False)
        with pytest.raises(ValueError):
            so.sample_steps(64, 4)


class TestSampleGrid:
    def test_forced(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            g = so.sample_grid(rng, 2, 2, 16, 16)
            assert g.G == 2 and 0 <= g.dy < 8 and 0 <= g.dx < 8

    def test_reproducible(self):
        a = [so.sample_grid(np.random.default_rng(3), 2, 16, 16, 16) for _ in range(3)]
        assert a[0] == a[1] == a[2]

    def test_uniform_over_divisors(self):
        rng = np.random.default_rng(4)
        counts = {2: 0, 4: 0, 8: 0}
        n = 10_000
        for _ in range(n):
            counts[so.sample_grid(rng, 2, 8, 16, 16).G] += 1
        for c in counts.values():
            assert abs(c / n - 1 / 3) < 0.05 / 3
        chi2 = sum((c - n / 3) ** 2 / (n / 3) for c in counts.values())
        assert chi2 < 13.8  # 0.999 quantile, 2 dof

    def test_empty(self):
        with pytest.raises(ValueError):
            so.sample_grid(np.random.default_rng(0), 3, 3, 16, 16)


class TestSoftAUC:
    def test_identity_reference(self, linear_softmax):
        f = linear_softmax(16, seed=1)
        rng = np.random.default_rng(5)
        I = rng.uniform(size=(4, 4))
        p = f.predict_proba(I[None])[0, 2]
        for _ in range(3):
            d, i = so.soft_auc(f, rng.normal(size=(4, 4)), I, I, 2, so.GridSpec(2), [1, 2, 3, 4], sp.SoftSortConfig(0.5), rng)
            assert float(d.data) == pytest.approx(p, abs=1e-14)
            assert float(i.data) == pytest.approx(p, abs=1e-14)

    def test_fd_3x3(self, linear_softmax):
        f = linear_softmax(9, seed=2)
        rng = np.random.default_rng(6)
        I = rng.uniform(size=(3, 3))
        cfg = sp.SoftSortConfig(0.5, seed=3)
        for direction in (0, 1):
            fn = lambda A: so.soft_auc(f, A, I, np.zeros((3, 3)), 1, so.GridSpec(3), np.arange(1, 10), cfg)[direction]
            chk = dc.finite_difference_check(fn, rng.uniform(size=(3, 3)), h=1e-5, tol=1e-3)
            assert chk.passed, chk

    def test_batch_matches_single(self, linear_softmax):
        f = linear_softmax(16, seed=3)
        rng = np.random.default_rng(7)
        A, I = rng.normal(size=(2, 4, 4)), rng.uniform(size=(2, 4, 4))
        cfg = sp.SoftSortConfig(0.3, **NO_GUMBEL)
        d, i = so.soft_auc(f, A, I, np.zeros_like(I), [0, 1], so.GridSpec(2), [1, 2, 4], cfg)
        for b in range(2):
            db, ib = so.soft_auc(f, A[b], I[b], np.zeros((4, 4)), b, so.GridSpec(2), [1, 2, 4], cfg)
            assert d.data[b] == pytest.approx(float(db.data), abs=1e-14)
            assert i.data[b] == pytest.approx(float(ib.data), abs=1e-14)

    def test_estimator_consistency(self, linear_softmax):
        # Hard permutation fed through the soft pipeline equals the hard metric exactly.
        f = linear_softmax(16, seed=4)
        rng = np.random.default_rng(8)
        A, I = rng.normal(size=(4, 4)), rng.uniform(size=(4, 4))
        P = sp.hard_sort(A).matrix
        m = sp.soft_topk_masks(P).data
        grid = so.GridSpec(4)
        vals = [f.predict_proba((I * (1 - so.upsample_mask(m[k], grid, 4, 4).data))[None])[0, 0] for k in range(16)]
        assert np.mean(vals) == pytest.approx(pm.deletion_auc(f, A, I, np.zeros((4, 4)), 0), abs=1e-14)

    def test_soft_to_hard_2x2(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            clf, I, I0, A = monotone_evidence_fixture(rng, 2)
            d, i = so.soft_auc(clf, A, I, I0, 1, so.GridSpec(2), np.arange(1, 5), sp.SoftSortConfig(0.01, 30, **NO_GUMBEL))
            assert abs(float(d.data) - pm.deletion_auc(clf, A, I, I0, 1)) < 1e-3
            assert abs(float(i.data) - pm.insertion_auc(clf, A, I, I0, 1)) < 1e-3

    @pytest.mark.xfail(strict=True, reason="entropic softness at tau=0.01 leaves ~8e-3 error for K=16; see notes")
    def test_soft_to_hard_4x4(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            clf, I, I0, A = monotone_evidence_fixture(rng, 4)
            d, i = so.soft_auc(clf, A, I, I0, 1, so.GridSpec(4), np.arange(1, 17), sp.SoftSortConfig(0.01, 30, **NO_GUMBEL))
            worst = max(worst, abs(float(d.data) - pm.deletion_auc(clf, A, I, I0, 1)))
            worst = max(worst, abs(float(i.data) - pm.insertion_auc(clf, A, I, I0, 1)))
        assert worst < 1e-3

    def test_bad_steps(self, linear_softmax):
        f = linear_softmax(4)
        with pytest.raises(ValueError):
            so.soft_auc(f, np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), 0, so.GridSpec(2), [0, 1], sp.SoftSortConfig())

    def test_non_finite_classifier(self):
        bad = lambda x: dc.mul(dc.Tensor(np.full((x.shape[0], 2), np.nan)), 1.0)
        with pytest.raises(dc.NumericError):
            so.soft_auc(bad, np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2)), 0, so.GridSpec(2), [1], sp.SoftSortConfig(1.0, **NO_GUMBEL))


class TestPenalty:
    def test_constant(self):
        assert float(so.smoothness_penalty(np.full((5, 5), 3.0)).data) == pytest.approx(0.0, abs=1e-28)

    def test_spike_zero_padding(self):
        A = np.zeros((3, 3))
        A[1, 1] = 1.0
        blurred = np.full((3, 3), 1 / 9)  # every 3x3 window contains the centre
        expect = ((A - blurred) ** 2).mean()
        assert expect == pytest.approx(8 / 81)
        assert float(so.smoothness_penalty(A, 3, padding="zero").data) == pytest.approx(expect, abs=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 9999), st.floats(-10, 10))
    def test_shift_invariance(self, seed, c):
        A = np.random.default_rng(seed).normal(size=(6, 6))
        base = float(so.smoothness_penalty(A).data)
        assert float(so.smoothness_penalty(A + c).data) == pytest.approx(base, rel=1e-9, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            so.smoothness_penalty(np.zeros((4, 4)), 4)
        with pytest.raises(ValueError):
            so.smoothness_penalty(np.zeros((4, 4)), 5)


class TestTotalLoss:
    def test_cancel(self):
        assert float(so.total_loss(0.5, 0.5, 0.0, so.LossWeights(1, 1, 0)).data) == 0.0

    def test_projection(self):
        assert float(so.total_loss(0.3, 0.9, 2.0, so.LossWeights(1, 0, 0)).data) == 0.3

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            so.LossWeights(0, 0, 0)
        with pytest.raises(ValueError):
            so.LossWeights(-1, 1, 0)

    def test_gradient_decomposes(self, linear_softmax):
        f = linear_softmax(9, seed=5)
        rng = np.random.default_rng(9)
        I = rng.uniform(size=(3, 3))
        grid, ks = so.GridSpec(3), np.arange(1, 10)
        cfg = sp.SoftSortConfig(0.4, seed=1)
        w = so.LossWeights(0.7, 1.3, 0.2)
        A0 = rng.uniform(size=(3, 3))

        def grad_of(fn):
            x = dc.Tensor(A0, requires_grad=True)
            dc.backward(fn(x))
            return x.grad

        auc = lambda A: so.soft_auc(f, A, I, np.zeros((3, 3)), 0, grid, ks, cfg)
        composite = grad_of(lambda A: so.total_loss(*auc(A), so.smoothness_penalty(A), w))
        parts = (
            w.lambda_del * grad_of(lambda A: auc(A)[0])
            - w.lambda_ins * grad_of(lambda A: auc(A)[1])
            + w.lambda_reg * grad_of(so.smoothness_penalty)
        )
        np.testing.assert_allclose(composite, parts, atol=1e-12)
        chk = dc.finite_difference_check(lambda A: so.total_loss(*auc(A), so.smoothness_penalty(A), w), A0, h=1e-5, tol=1e-3)
        assert chk.passed, chk


class TestObjective:
    def test_reference_average(self, linear_softmax):
        f = linear_softmax(16, seed=6)
        rng = np.random.default_rng(10)
        A, I = rng.normal(size=(4, 4)), rng.uniform(size=(4, 4))
        refs = [np.zeros((4, 4)), np.full((4, 4), 0.5)]
        cfg = sp.SoftSortConfig(0.5, **NO_GUMBEL)
        w = so.LossWeights()
        loss, parts = so.objective(f, A, I, refs, 0, so.GridSpec(2), [1, 2, 3, 4], cfg, w)
        singles = [so.soft_auc(f, A, I, r, 0, so.GridSpec(2), [1, 2, 3, 4], cfg) for r in refs]
        assert parts["deletion"] == pytest.approx(np.mean([float(d.data) for d, _ in singles]), abs=1e-14)
        assert parts["insertion"] == pytest.approx(np.mean([float(i.data) for _, i in singles]), abs=1e-14)
        expect = parts["deletion"] - parts["insertion"] + w.lambda_reg * parts["penalty"]
        assert float(loss.data) == pytest.approx(expect, abs=1e-14)

    def test_no_references(self, linear_softmax):
        with pytest.raises(ValueError):
            so.objective(linear_softmax(4), np.zeros((2, 2)), np.zeros((2, 2)), [], 0, so.GridSpec(2), [1], sp.SoftSortConfig(), so.LossWeights())
