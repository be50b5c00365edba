import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentwear import fleet
from latentwear.ctmc import RateParams
from latentwear.evaluation import (
    FitConfig,
    SplitSpec,
    mse,
    run_splits,
    state_occupancy,
)

TRUTH = RateParams.homogeneous(0.679, 0.274, 0.649, 0.787, 0.794, 31)


class TestMse:
    def test_identity_is_zero(self):
        obs = np.array([[1, 2, 3], [2, 2, 1]])
        assert mse(obs[:1], obs[0]) == 0.0

    def test_constant_off_by_one(self):
        obs = np.array([[2, 3, 2, 3]])
        pred = np.array([1, 2, 1, 2])
        assert mse(obs, pred) == 1.0

    def test_hand_case(self):
        # observed (1,3) vs predicted (1,1): (0 + 4) / 2
        assert mse(np.array([[1, 3]]), np.array([1, 1])) == 2.0

    def test_missing_cells_shrink_normalizer(self):
        obs = np.array([[1, 0, 3]])  # middle cell missing
        pred = np.array([1, 1, 1])
        assert mse(obs, pred) == pytest.approx((0 + 4) / 2)

    def test_ship_without_observations_drops_out(self):
        obs = np.array([[1, 3], [0, 0]])
        assert mse(obs, np.array([1, 1])) == 2.0

    def test_zero_scored_cells_rejected(self):
        with pytest.raises(ValueError, match="no scored cells"):
            mse(np.zeros((2, 3), dtype=int), np.array([1, 1, 1]))

    def test_sum_over_age_variant(self):
        obs = np.array([[1, 3]])
        assert mse(obs, np.array([1, 1]), sum_over_age=True) == 4.0

    def test_mismatched_ages_rejected(self):
        with pytest.raises(ValueError, match="age ranges"):
            mse(np.array([[1, 2]]), np.array([1, 2, 3]))

    @given(st.lists(st.lists(st.integers(min_value=1, max_value=3), min_size=4,
                             max_size=4), min_size=1, max_size=6),
           st.lists(st.integers(min_value=1, max_value=3), min_size=4, max_size=4))
    @settings(max_examples=100)
    def test_bounds_and_symmetry(self, obs_rows, pred):
        obs = np.array(obs_rows)
        pred = np.array(pred)
        v = mse(obs, pred)
        assert 0.0 <= v <= 4.0
        shuffled = obs[::-1]
        assert mse(shuffled, pred) == pytest.approx(v, rel=1e-12)
        if np.all(obs == pred[None, :]):
            assert v == 0.0


class TestStateOccupancy:
    def test_all_state_one(self):
        panel = fleet.simulate_panel(
            RateParams.homogeneous(0, 0, 0, 0.5, 0.5, 4), (7, 4, 1), 0.0, seed=1
        )
        freq = state_occupancy(panel)
        assert np.allclose(freq[:, 0], 1.0)

    def test_direct_counting(self):
        recs = [
            fleet.StateRecord("a", 1, np.array([1, 2])),
            fleet.StateRecord("b", 1, np.array([3, 2])),
        ]
        freq = state_occupancy(fleet.StatePanel(recs, 2, 1))
        assert freq[0].tolist() == [0.5, 0.0, 0.5]
        assert freq[1].tolist() == [0.0, 1.0, 0.0]

    def test_rows_sum_to_one_with_full_observation(self):
        panel = fleet.simulate_panel(TRUTH, (25, 10, 1), 0.0, seed=2)
        freq = state_occupancy(panel)
        assert np.allclose(freq.sum(axis=1), 1.0)

    def test_unobserved_age_gives_zero_row(self):
        recs = [fleet.StateRecord("a", 1, np.array([1, 0]))]
        freq = state_occupancy(fleet.StatePanel(recs, 2, 1))
        assert freq[1].tolist() == [0.0, 0.0, 0.0]


class TestRunSplits:
    def test_identical_ships_give_equal_train_test(self):
        # every ship has the same state series, so any split scores equally
        states = np.tile([1, 1, 2, 2, 3, 3, 3, 3, 3, 3], (10, 1))
        recs = [fleet.StateRecord(f"s{i}", 1, states[i]) for i in range(10)]
        panel = fleet.StatePanel(recs, 10, 1)
        report = run_splits(panel, SplitSpec(3, 2, seed=5),
                            FitConfig(restarts=2))
        assert report.train_mse == pytest.approx(report.test_mse)

    def test_deterministic(self):
        panel = fleet.simulate_panel(TRUTH, (20, 31, 1), 0.0, seed=3)
        spec = SplitSpec(5, 4, seed=9)
        a = run_splits(panel, spec, FitConfig(restarts=2))
        b = run_splits(panel, spec, FitConfig(restarts=2))
        assert np.array_equal(a.train_mse, b.train_mse)
        assert np.array_equal(a.test_mse, b.test_mse)

    def test_train_close_to_test_on_synthetic(self):
        panel = fleet.simulate_panel(TRUTH, (40, 31, 1), 0.0, seed=4)
        report = run_splits(panel, SplitSpec(5, 30, seed=11),
                            FitConfig(restarts=2))
        gap = abs(report.mean_train - report.mean_test) / report.mean_test
        assert gap < 0.10
        assert not report.failed

    def test_too_small_panel_rejected(self):
        panel = fleet.simulate_panel(TRUTH, (6, 31, 1), 0.0, seed=5)
        with pytest.raises(ValueError, match="at least"):
            run_splits(panel, SplitSpec(5, 2, seed=1), FitConfig())

    def test_mcmc_fitter_runs(self):
        panel = fleet.simulate_panel(TRUTH, (15, 31, 1), 0.0, seed=6)
        report = run_splits(
            panel, SplitSpec(3, 2, seed=13),
            FitConfig(fitter="mcmc", warmup=150, draws=200),
        )
        assert len(report.train_mse) == 2

    def test_histogram_bins(self):
        panel = fleet.simulate_panel(TRUTH, (20, 31, 1), 0.0, seed=7)
        report = run_splits(panel, SplitSpec(4, 6, seed=15), FitConfig(restarts=2))
        train_counts, test_counts, edges = report.histogram(bins=10)
        assert train_counts.sum() == 6 and test_counts.sum() == 6
        assert len(edges) == 11
