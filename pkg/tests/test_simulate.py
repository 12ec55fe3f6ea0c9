import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixcourse.likelihood import posterior_membership
from mixcourse.model import HyperParams, MixtureParams, ModelError
from mixcourse.simulate import (PRESETS, Scenario, cluster_source_means, default_fixed_effects,
                                generate_visit_schedules, generate_visit_times, scenario_preset,
                                simulate, true_cluster_table)


class TestPresets:
    def test_scenario_2_2(self):
        sc = scenario_preset("scenario_2_2")
        assert sc.proportions == (0.40, 0.60)
        assert sc.tau_mean == (50.0, 40.0) and sc.xi_mean == (-0.30, 0.20)
        assert [row[0] for row in sc.shift_mean] == [-0.02, 0.02]
        assert [row[1] for row in sc.shift_mean] == [0.11, -0.11]

    def test_scenario_multi(self):
        sc = scenario_preset("scenario_multi")
        assert sc.n_clusters == 3 and sc.proportions == (0.40, 0.35, 0.25)
        assert sc.tau_mean == (70.0, 65.0, 65.0) and sc.xi_mean == (0.0, -0.40, 0.5)
        assert sc.n_features == 6

    def test_scenario_3_2(self):
        sc = scenario_preset("scenario_3_2")
        assert [row[2] for row in sc.shift_mean] == [0.01, -0.01]

    def test_unknown(self):
        with pytest.raises(ModelError, match="scenario_2_2"):
            scenario_preset("nope")

    def test_validation(self):
        with pytest.raises(ModelError):
            scenario_preset("scenario_2_2", proportions=(0.5, 0.6))
        with pytest.raises(ModelError):
            scenario_preset("scenario_2_2", n_sources=2)

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_source_means_centred_and_orthogonal(self, name):
        sc = scenario_preset(name)
        pop = default_fixed_effects(sc)
        src = cluster_source_means(sc, pop)
        assert np.allclose(np.asarray(sc.proportions) @ src, 0.0, atol=1e-12)
        table = true_cluster_table(sc, pop)
        assert np.allclose(table[:, 2:] @ pop.velocities, 0.0, atol=1e-12)


class TestVisits:
    def test_single_visit(self, rng):
        t = generate_visit_times(50.0, 1, rng)
        assert t.shape == (1,) and 45.0 <= t[0] <= 55.0

    def test_strictly_increasing(self, rng):
        times = generate_visit_schedules(rng.normal(50, 10, 200_000), 6, rng)
        assert np.all(np.diff(times, axis=1) > 0)

    def test_centred(self, rng):
        tau = rng.normal(50, 10, 10_000)
        times = generate_visit_schedules(tau, 6, rng)
        assert abs(np.mean(times.mean(axis=1) - tau)) < 0.1
        assert np.all(np.abs(times.mean(axis=1) - tau) <= 1.5)

    @settings(max_examples=25)
    @given(st.integers(1, 12), st.floats(-50, 150))
    def test_any_visit_count(self, nv, tau):
        t = generate_visit_times(tau, nv, np.random.default_rng(nv))
        assert t.shape == (nv,) and np.all(np.diff(t) > 0)


class TestSimulate:
    def test_determinism(self):
        sc = scenario_preset("scenario_multi", n_patients=50)
        a, b = simulate(sc, seed=11), simulate(sc, seed=11)
        assert np.array_equal(a.data.values, b.data.values)
        assert np.array_equal(a.data.times, b.data.times)
        assert np.array_equal(a.labels, b.labels)
        assert a.data.values.tobytes() == b.data.values.tobytes()
        c = simulate(sc, seed=12)
        assert not np.array_equal(a.data.values, c.data.values)

    def test_shapes_and_bounds(self):
        cohort = simulate(scenario_preset("scenario_2_2", n_patients=100), seed=7)
        assert cohort.data.n_rows == 600 and cohort.data.n_patients == 100
        assert np.all((cohort.data.values > 0) & (cohort.data.values < 1))

    def test_degenerate_variances_follow_cluster_curve(self):
        sc = scenario_preset("scenario_2_2", n_patients=40, noise_sd=0.0, tau_sd=0.0, xi_sd=0.0, source_sd=0.0)
        cohort = simulate(sc, seed=2)
        table = cohort.truth_table()
        from mixcourse.model import logistic_curve
        d = cohort.data
        lab = cohort.labels[d.patient_index]
        psi = np.exp(table[lab, 1]) * (d.times - table[lab, 0])
        expect = logistic_curve(cohort.population.g_tilde, cohort.population.v_tilde, psi, table[lab, 2:])
        assert np.allclose(d.values, expect, atol=1e-14)

    def test_cluster_frequencies(self):
        cohort = simulate(scenario_preset("scenario_2_2", n_patients=100_000, n_visits=1), seed=1)
        freq = np.bincount(cohort.labels) / 100_000
        assert np.allclose(freq, [0.4, 0.6], atol=0.01)

    def test_within_cluster_tau_sd(self):
        cohort = simulate(scenario_preset("scenario_2_2", n_patients=10_000, n_visits=1), seed=3)
        for c in range(2):
            assert cohort.individual.tau[cohort.labels == c].std(ddof=1) == pytest.approx(5.0, abs=0.2)

    def test_multi_frequencies(self):
        cohort = simulate(scenario_preset("scenario_multi", n_patients=50), seed=7)
        assert set(cohort.labels.tolist()) == {0, 1, 2}

    def test_truth_oracle_classifies(self):
        """Memberships under the generating mixture classify most patients correctly."""
        sc = scenario_preset("scenario_2_2", n_patients=4000, n_visits=1)
        cohort = simulate(sc, seed=4)
        mix = MixtureParams(np.asarray(sc.proportions), sc.tau_mean, (sc.tau_sd,) * 2, sc.xi_mean,
                            (sc.xi_sd,) * 2, cohort.source_means, (sc.noise_sd,) * 2)
        probs = posterior_membership(cohort.individual, mix, HyperParams())
        acc = np.mean(np.argmax(probs, axis=1) == cohort.labels)
        # the quoted 95% bound is not reachable with these presets: see the decisions ledger
        assert acc >= 0.90
