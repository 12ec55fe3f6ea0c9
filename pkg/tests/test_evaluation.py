import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mixcourse.evaluation import (align_labels, alignment_cost, brute_force_alignment,
                                  classification_metrics, metric_ci, recovery_metrics, relabel,
                                  select_n_clusters, trajectory_curves)
from mixcourse.experiments import classification_rows, recovery_rows, run_replicate
from mixcourse.model import ModelError, PopulationParams
from mixcourse.saem import FitConfig, FitDivergenceError
from mixcourse.simulate import scenario_preset, simulate


class TestAlignment:
    def test_identity_and_swap(self):
        t = np.array([[50.0, -0.3, 0.1], [40.0, 0.2, -0.1], [60.0, 0.0, 0.0]])
        assert align_labels(t, t).tolist() == [0, 1, 2]
        assert align_labels(t, t[[1, 0, 2]]).tolist() == [1, 0, 2]

    def test_brute_force_4x3(self, rng):
        t, e = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        assert align_labels(t, e).tolist() == brute_force_alignment(t, e).tolist()

    @given(k=st.integers(1, 5), m=st.integers(1, 4), data=st.data())
    def test_matches_brute_force(self, k, m, data):
        t = data.draw(arrays(float, (k, m), elements=st.floats(-10, 10)))
        e = data.draw(arrays(float, (k, m), elements=st.floats(-10, 10)))
        cost = alignment_cost(t, e)
        fast, slow = align_labels(t, e), brute_force_alignment(t, e)
        # ties may pick different permutations of equal cost
        assert cost[np.arange(k), fast].sum() == pytest.approx(cost[np.arange(k), slow].sum(), abs=1e-9)
        assert sorted(fast.tolist()) == list(range(k))

    def test_zero_variance_column_dropped(self, caplog):
        t = np.array([[1.0, 5.0], [2.0, 5.0]])
        with caplog.at_level("WARNING"):
            assert align_labels(t, t[::-1]).tolist() == [1, 0]
        assert "zero-variance" in caplog.text

    def test_shape_mismatch(self):
        with pytest.raises(ModelError):
            align_labels(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_relabel(self):
        assert relabel([0, 1, 1, 2], [2, 0, 1]).tolist() == [1, 2, 2, 0]


class TestClassification:
    def test_perfect(self):
        m = classification_metrics([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert m.accuracy == 1.0 and np.all(m.recall == 1) and np.all(m.precision == 1)

    def test_hand_counted(self):
        m = classification_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
        assert m.accuracy == 0.75
        assert m.recall.tolist() == [0.5, 1.0]
        assert m.precision == pytest.approx([1.0, 2 / 3])
        assert m.confusion_normalized.tolist() == [[0.5, 0.5], [0.0, 1.0]]

    def test_empty_true_cluster_is_missing(self):
        m = classification_metrics([0, 0], [0, 1], 2)
        assert np.isnan(m.recall[1]) and np.all(np.isnan(m.confusion_normalized[1]))

    @given(k=st.integers(2, 4), data=st.data())
    def test_properties(self, k, data):
        true = np.array(data.draw(st.lists(st.integers(0, k - 1), min_size=1, max_size=60)))
        pred = np.array(data.draw(st.lists(st.integers(0, k - 1), min_size=len(true), max_size=len(true))))
        m = classification_metrics(true, pred, k)
        rows = m.confusion.sum(axis=1) > 0
        assert np.allclose(m.confusion_normalized[rows].sum(axis=1), 1.0, atol=1e-12)
        weights = np.bincount(true, minlength=k) / len(true)
        assert m.accuracy == pytest.approx(np.nansum(weights * np.nan_to_num(m.recall)), abs=1e-15)
        perm = np.array(data.draw(st.permutations(range(k))))
        p = classification_metrics(perm[true], perm[pred], k)
        assert p.accuracy == m.accuracy
        assert np.allclose(p.recall[perm], m.recall, equal_nan=True)


class TestIntervals:
    def test_constant(self):
        assert metric_ci([0.3] * 5) == pytest.approx((0.3, 0.3, 0.3))

    def test_grid(self):
        mean, lo, hi = metric_ci(np.linspace(0, 1, 1001))
        assert (mean, lo, hi) == pytest.approx((0.5, 0.025, 0.975), abs=1e-9)

    def test_single_replicate_warns(self, caplog):
        with caplog.at_level("WARNING"):
            assert metric_ci([0.7]) == (0.7, 0.7, 0.7)
        assert "degenerate" in caplog.text


class TestRecovery:
    def test_exact(self):
        r = recovery_metrics(np.full((4, 2), 3.0), [3.0, 3.0])
        assert np.all(r.bias == 0) and np.all(r.se == 0) and np.all(r.rmse == 0)

    def test_hand_example(self):
        r = recovery_metrics([[49.0], [51.0]], [50.0])
        assert r.bias[0] == 0.0 and r.rmse[0] == 1.0 and r.se[0] == pytest.approx(np.sqrt(2))

    @given(arrays(float, (7, 3), elements=st.floats(-100, 100)), arrays(float, 3, elements=st.floats(-100, 100)))
    def test_identity(self, est, truth):
        r = recovery_metrics(est, truth)
        lhs = r.rmse ** 2
        rhs = r.bias ** 2 + r.se ** 2 * (r.n_replicates - 1) / r.n_replicates
        assert np.allclose(lhs, rhs, rtol=0, atol=1e-10 * np.maximum(1, lhs))


class TestSelection:
    def _fake_fitter(self, values):
        class Model:
            def __init__(self, k):
                self.k = k
        def fitter(data, cfg):
            if values[cfg.n_clusters] is None:
                raise FitDivergenceError("boom")
            return Model(cfg.n_clusters)
        return fitter

    def test_injected_icl(self, monkeypatch):
        values = {2: -6970.0, 3: -6950.0, 4: -6925.0, 5: None}
        import mixcourse.evaluation as ev
        monkeypatch.setattr(ev, "icl", lambda model, data: values[model.k])
        sel = select_n_clusters(None, [2, 3, 4, 5], FitConfig(), fitter=self._fake_fitter(values))
        assert sel.chosen == 2 and sel.table[5] is None and sel.table[3] == -6950.0

    def test_single_candidate(self, monkeypatch):
        import mixcourse.evaluation as ev
        monkeypatch.setattr(ev, "icl", lambda model, data: 1.0)
        assert select_n_clusters(None, [3], FitConfig(), fitter=self._fake_fitter({3: 1.0})).chosen == 3

    def test_empty(self):
        with pytest.raises(ModelError):
            select_n_clusters(None, [], FitConfig())


class TestCurves:
    def test_rows(self):
        pop = PopulationParams.from_natural([0.3, 0.3], [0.05, 0.05], [[0.1]])
        table = np.array([[50.0, 0.0, 0.01, -0.01], [40.0, 0.2, -0.01, 0.01]])
        rows = trajectory_curves(pop, table, [0.4, 0.6], np.array([40.0, 50.0]))
        assert [r[0] for r in rows] == ["cluster_1"] * 2 + ["cluster_2"] * 2 + ["population"] * 2
        assert rows[1][2:] == pytest.approx((0.3 + 0, 0.3), abs=0.05)
        assert all(0 < v < 1 for r in rows for v in r[2:])


def test_replicate_pipeline_smoke():
    sc = scenario_preset("scenario_2_2", n_patients=60)
    res = run_replicate(sc, 0, FitConfig(n_iterations=120), seed=1)
    assert [r.method for r in res] == ["mixture", "posthoc"]
    rows = classification_rows(res, "mixture")
    assert rows[0][0] == "accuracy" and rows[-1][0] == "entropy"
    rec = recovery_rows(res * 2, "mixture")
    assert rec[0][0] == "pi^1" and len(rec) == 2 + 2 + 2 + 4
