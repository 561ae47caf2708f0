import numpy as np
import pytest

from herdtwin.gbdt import GbdtConfig
from herdtwin.uncertainty import (
    ALPHA_GRID,
    BootstrapSet,
    CalibrationConstants,
    UncertaintyError,
    bootstrap_fit,
    calibrate,
    calibrate_alpha,
    interval,
    picp,
    replica_predictions,
    sigma_raw,
)


def toy_training(n_cows=6, rows=40, seed=0, noise=0.2, cow_sigma=0.3):
    rng = np.random.default_rng(seed)
    xs, ys, cows = [], [], []
    for c in range(n_cows):
        x = rng.uniform(-2, 2, size=(rows, 3))
        offset = rng.normal(0, cow_sigma)
        y = 1.5 * x[:, 0] + offset + rng.normal(0, noise, rows)
        xs.append(x)
        ys.append(y)
        cows.append(np.full(rows, f"cow{c}", dtype=object))
    return np.vstack(xs), np.concatenate(ys), np.concatenate(cows)


CFG = GbdtConfig(n_trees=25, max_leaves=7, min_samples_leaf=5, seed=0)


class TestBootstrapFit:
    def test_two_replicas_distinct_resamples(self):
        x, y, cows = toy_training()
        bs = bootstrap_fit(x, y, cows, CFG, ["a", "b", "c"], b=2, seed=3)
        assert bs.b == 2
        assert len(set(bs.seeds)) == 2
        preds = replica_predictions(bs, x[:50])
        assert not np.array_equal(preds[0], preds[1])

    def test_single_cow_duplicates_rows(self):
        x, y, cows = toy_training(n_cows=1, rows=30)
        bs = bootstrap_fit(x, y, cows, CFG, ["a", "b", "c"], b=2, seed=0)
        # only one cow to draw: every replica trains on that cow's rows
        assert bs.b == 2

    def test_b_too_small(self):
        x, y, cows = toy_training()
        with pytest.raises(UncertaintyError):
            bootstrap_fit(x, y, cows, CFG, ["a", "b", "c"], b=1)

    def test_deterministic(self):
        x, y, cows = toy_training()
        a = bootstrap_fit(x, y, cows, CFG, ["a", "b", "c"], b=3, seed=9)
        b = bootstrap_fit(x, y, cows, CFG, ["a", "b", "c"], b=3, seed=9)
        for m1, m2 in zip(a.replicas, b.replicas):
            from herdtwin.gbdt import serialize_model

            assert serialize_model(m1) == serialize_model(m2)


class TestSigmaRaw:
    def test_constant_target_zero_spread(self):
        x, _, cows = toy_training()
        y = np.full(x.shape[0], 38.6)
        bs = bootstrap_fit(x, y, cows, CFG, ["a", "b", "c"], b=3, seed=0)
        assert sigma_raw(bs, x[:20]) == pytest.approx(np.zeros(20), abs=1e-12)

    def test_two_point_formula(self):
        # std of {38.0, 38.2} with ddof=1 = 0.2 / sqrt(2)
        preds = np.array([[38.0], [38.2]])
        assert preds.std(axis=0, ddof=1)[0] == pytest.approx(0.1414213562, abs=1e-9)

    def test_matches_direct_recompute(self):
        x, y, cows = toy_training()
        bs = bootstrap_fit(x, y, cows, CFG, ["a", "b", "c"], b=4, seed=1)
        sig = sigma_raw(bs, x[:10])
        direct = replica_predictions(bs, x[:10]).std(axis=0, ddof=1)
        assert np.array_equal(sig, direct)


class TestCalibrate:
    def test_well_calibrated_sigma_selects_alpha_near_one(self):
        # DERIVED: when sigma_raw is the true noise scale, coverage at
        # alpha=1 is the nominal level and the grid picks ~1.0
        rng = np.random.default_rng(42)
        n = 5000
        sigma = rng.uniform(0.05, 0.3, n)
        y_hat = np.full(n, 38.6)
        y = y_hat + rng.normal(0, sigma)
        cc = calibrate_alpha(sigma, y_hat, y, target_coverage=0.95, sigma_min=0.0)
        assert 0.8 <= cc.alpha <= 1.2
        assert not cc.under_coverage

    def test_doubling_sigma_halves_alpha(self):
        # DERIVED: scaling harness (up to grid granularity)
        rng = np.random.default_rng(7)
        n = 4000
        sigma = rng.uniform(0.1, 0.2, n)
        y_hat = np.zeros(n)
        y = rng.normal(0, 0.25, n)
        a1 = calibrate_alpha(sigma, y_hat, y, sigma_min=0.0).alpha
        a2 = calibrate_alpha(2 * sigma, y_hat, y, sigma_min=0.0).alpha
        assert abs(a2 - a1 / 2) <= 0.1 + 1e-9

    def test_degenerate_sigma_floor_drives_coverage(self):
        rng = np.random.default_rng(3)
        n = 500
        sigma = np.zeros(n)
        y_hat = np.zeros(n)
        y = rng.normal(0, 0.05, n)
        wide = calibrate_alpha(sigma, y_hat, y, sigma_min=0.2)
        assert wide.alpha == ALPHA_GRID[0]  # floor alone covers: smallest alpha
        narrow = calibrate_alpha(sigma, y_hat, y, sigma_min=1e-6)
        assert narrow.under_coverage and narrow.alpha == 3.0

    def test_full_path_through_bootstrap(self):
        x, y, cows = toy_training(n_cows=8, rows=60, cow_sigma=0.4)
        bs = bootstrap_fit(x, y, cows, CFG, ["a", "b", "c"], b=8, seed=2)
        from herdtwin.gbdt import fit, predict_matrix

        main = fit(x, y, CFG, ["a", "b", "c"])
        cc = calibrate(bs, x, y, predict_matrix(main, x), sigma_min=0.03)
        assert cc.alpha in ALPHA_GRID

    def test_calibration_set_coverage_meets_target_unless_warned(self):
        rng = np.random.default_rng(12)
        for trial in range(8):
            n = 400
            sigma = rng.uniform(0.02, 0.3, n)
            y_hat = np.zeros(n)
            y = rng.normal(0, rng.uniform(0.05, 0.4), n)
            cc = calibrate_alpha(sigma, y_hat, y, target_coverage=0.9, sigma_min=0.02)
            lo, hi = interval(y_hat, sigma, cc)
            achieved = picp(y, lo, hi)
            if not cc.under_coverage:
                assert achieved >= 0.9


class TestInterval:
    CC = CalibrationConstants(alpha=1.0, sigma_min=0.05, z_alpha=1.96)

    def test_floor_width(self):
        lo, hi = interval(38.6, 0.0, self.CC)
        assert hi - lo == pytest.approx(2 * 1.96 * 0.05, abs=1e-12)

    def test_midpoint_is_forecast(self):
        lo, hi = interval(39.1, 0.2, self.CC)
        assert (lo + hi) / 2 == pytest.approx(39.1, abs=1e-12)

    def test_direct_formula(self):
        cc = CalibrationConstants(alpha=1.2, sigma_min=0.05)
        lo, hi = interval(38.6, 0.1, cc)
        assert hi - 38.6 == pytest.approx(1.96 * 0.12, abs=1e-12)
        assert 38.6 - lo == pytest.approx(1.96 * 0.12, abs=1e-12)

    def test_width_monotone_in_alpha_and_floor(self):
        sig = np.array([0.0, 0.05, 0.2])
        widths = []
        for alpha in (0.5, 1.0, 2.0):
            lo, hi = interval(np.zeros(3), sig, CalibrationConstants(alpha=alpha, sigma_min=0.03))
            widths.append(hi - lo)
        assert (np.diff(np.vstack(widths), axis=0) >= -1e-15).all()
        widths = []
        for s_min in (0.0, 0.05, 0.2):
            lo, hi = interval(np.zeros(3), sig, CalibrationConstants(alpha=1.0, sigma_min=s_min))
            widths.append(hi - lo)
        assert (np.diff(np.vstack(widths), axis=0) >= -1e-15).all()


class TestPicp:
    def test_all_inside(self):
        assert picp(np.zeros(5), -np.ones(5), np.ones(5)) == 1.0

    def test_none_inside(self):
        assert picp(np.full(4, 10.0), -np.ones(4), np.ones(4)) == 0.0

    def test_half_inside(self):
        y = np.array([0.0, 0.0, 10.0, 10.0])
        assert picp(y, -np.ones(4), np.ones(4)) == 0.5

    def test_boundary_inclusive(self):
        assert picp(np.array([1.0]), np.array([1.0]), np.array([2.0])) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(UncertaintyError):
            picp(np.zeros(3), np.zeros(2), np.zeros(3))
