import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentwear import fleet
from latentwear.ctmc import RateParams, deterioration_matrix, maintenance_matrix
from latentwear.hmm import (
    evolve,
    log_likelihood,
    log_likelihood_from_counts,
    predict_states,
    state_counts,
)

TABLE_MEANS = RateParams.homogeneous(0.679, 0.274, 0.649, 0.787, 0.794, 31)

rate = st.floats(min_value=0.0, max_value=5.0, allow_nan=False)
prob = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


def params_strategy():
    return st.tuples(rate, rate, rate, prob, prob).map(
        lambda v: RateParams.homogeneous(*v, max_age=31)
    )


class TestEvolve:
    def test_zero_rates_stay_in_state_one(self):
        p = RateParams.homogeneous(0, 0, 0, 0.5, 0.5, 31)
        traj = evolve(p, 31)
        assert np.allclose(traj, np.tile([1.0, 0.0, 0.0], (31, 1)))

    def test_hand_vector_at_published_means(self):
        traj = evolve(TABLE_MEANS, 1)
        assert traj[0] == pytest.approx([0.3856, 0.3060, 0.3084], abs=5e-4)
        after_m = traj[0] @ maintenance_matrix(0.787, 0.794)
        assert after_m == pytest.approx([0.8713, 0.1287, 0.0], abs=5e-4)

    @given(params_strategy())
    @settings(max_examples=100)
    def test_simplex_preserved(self, params):
        traj = evolve(params, 31)
        assert np.max(np.abs(traj.sum(axis=1) - 1.0)) < 1e-10
        assert traj.min() >= -1e-10

    def test_matches_matrix_recursion(self):
        # scalar fast path vs explicit matrix products
        rng = np.random.default_rng(5)
        for _ in range(20):
            l1, l2, l3 = rng.uniform(0, 3, 3)
            p21, p31 = rng.uniform(0, 1, 2)
            params = RateParams.homogeneous(l1, l2, l3, p21, p31, 12)
            d = deterioration_matrix(l1, l2, l3, 1.0)
            m = maintenance_matrix(p21, p31)
            vec = np.array([1.0, 0.0, 0.0])
            ref = []
            for t in range(1, 13):
                vec = vec @ d if t == 1 else (vec @ m) @ d
                ref.append(vec)
            assert np.allclose(evolve(params, 12), np.array(ref), atol=1e-14)

    def test_no_repair_failure_mass_increases_to_fixed_point(self):
        p = RateParams.homogeneous(0.5, 0.3, 0.6, 0.0, 0.0, 31)
        d3 = evolve(p, 31)[:, 2]
        assert np.all(np.diff(d3) > -1e-15)

    def test_fast_failure_rate_absorbs(self):
        # lambda3 = 50 surrogate for infinity: yearly demotion 3 -> 2 is
        # undone within the year, so mass piles up in state 3
        p = RateParams.homogeneous(0.5, 0.3, 50.0, 0.0, 0.0, 31)
        traj = evolve(p, 31)
        assert traj[-1, 2] > 0.999

    def test_pure_deterioration_absorption_is_monotone(self):
        # no maintenance at all: cumulative products of D have nondecreasing
        # failure mass (upper-triangular structure)
        d = deterioration_matrix(0.5, 0.3, 0.6, 1.0)
        vec = np.array([1.0, 0.0, 0.0])
        last = 0.0
        for _ in range(31):
            vec = vec @ d
            assert vec[2] >= last - 1e-15
            last = vec[2]

    def test_equal_rates_multi_period_matches_single(self):
        rates = [(0.4, 0.2, 0.5)] * 4
        p4 = RateParams.equal_periods(rates, 0.7, 0.6, 31)
        p1 = RateParams.homogeneous(0.4, 0.2, 0.5, 0.7, 0.6, 31)
        assert np.max(np.abs(evolve(p4, 31) - evolve(p1, 31))) < 1e-12


class TestLogLikelihood:
    def test_certain_event_scores_zero(self):
        p = RateParams.homogeneous(0, 0, 0, 0.5, 0.5, 31)
        counts = np.zeros((1, 3))
        counts[0, 0] = 1  # one ship observed in state 1 at age 1
        assert log_likelihood_from_counts(counts, p) == 0.0

    def test_impossible_event_hits_floor(self):
        p = RateParams.homogeneous(0, 0, 0, 0.5, 0.5, 31)
        counts = np.zeros((1, 3))
        counts[0, 2] = 1
        ll = log_likelihood_from_counts(counts, p)
        assert ll == pytest.approx(np.log(1e-300))

    def test_brute_force_product_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            params = RateParams.homogeneous(*rng.uniform(0.05, 2, 3),
                                            *rng.uniform(0, 1, 2), max_age=6)
            panel = fleet.simulate_panel(params, (4, 6, 1), 0.3,
                                         seed=int(rng.integers(1e6)))
            traj = evolve(params, 6)
            ref = 0.0
            for rec in panel.ships:
                for t in range(1, 7):
                    s = rec.states[t - 1]
                    if s:
                        ref += np.log(traj[t - 1, s - 1])
            assert log_likelihood(panel, params) == pytest.approx(ref, rel=1e-12)

    def test_ship_permutation_invariant(self):
        params = RateParams.homogeneous(0.4, 0.3, 0.5, 0.6, 0.7, 8)
        panel = fleet.simulate_panel(params, (10, 8, 2), 0.2, seed=3)
        shuffled = fleet.StatePanel(list(reversed(panel.ships)), 8, 2)
        assert log_likelihood(panel, params) == pytest.approx(
            log_likelihood(shuffled, params), rel=1e-14
        )

    def test_empty_panel_rejected(self):
        p = RateParams.homogeneous(0.4, 0.3, 0.5, 0.6, 0.7, 4)
        with pytest.raises(ValueError, match="no observed states"):
            log_likelihood_from_counts(np.zeros((4, 3)), p)


class TestPredict:
    def test_zero_rates_predict_state_one(self):
        p = RateParams.homogeneous(0, 0, 0, 0.5, 0.5, 31)
        assert np.all(predict_states(p, 31) == 1)

    def test_published_means_age_one(self):
        pred = predict_states(TABLE_MEANS, 1)
        assert pred[0] == 1  # argmax of (0.3856, 0.3060, 0.3084)

    def test_tie_breaks_to_lowest_state(self):
        assert int(np.argmax(np.array([0.5, 0.5, 0.0]))) == 0

    def test_sample_rule_deterministic_per_seed(self):
        a = predict_states(TABLE_MEANS, 31, rule="sample", seed=9)
        b = predict_states(TABLE_MEANS, 31, rule="sample", seed=9)
        assert np.array_equal(a, b)
        assert set(np.unique(a)) <= {1, 2, 3}

    def test_sample_requires_seed(self):
        with pytest.raises(ValueError, match="seed"):
            predict_states(TABLE_MEANS, 5, rule="sample")


def test_state_counts_aggregation():
    states = np.array([[1, 2, 0], [1, 3, 3]])
    counts = state_counts(states, 3)
    assert counts.tolist() == [[2, 0, 0], [0, 1, 1], [0, 0, 1]]
