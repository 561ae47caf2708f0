import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdtwin.features import (
    FeatureError,
    FeatureGroup,
    FeatureMatrix,
    PooledMatrix,
    assemble,
    cross_modal_features,
    cumulative_stress,
    physiological_derivatives,
    read_features,
    rolling_stats,
    temporal_encoding,
    to_delimited,
    uwb_speed_and_zone,
    write_features,
)
from herdtwin.timeseries import AlignedFrame, Channel, Modality, Timestamp, slice_window
from herdtwin.twin import run_twin


def naive_window_stats(values, window, t):
    """Independent per-t recomputation of every rolling statistic."""
    padded = np.concatenate([np.full(window - 1, np.nan), values])
    row = padded[t : t + window]
    n = int(np.sum(~np.isnan(row)))
    out = {}
    out["mean"] = np.nansum(row) / n if n >= 1 else np.nan
    if n >= 2:
        dev = row - out["mean"]
        m2_sum = np.nansum(dev * dev)
        out["var"] = m2_sum / (n - 1)
        out["std"] = math.sqrt(out["var"])
        m2 = m2_sum / n
        m3 = np.nansum(dev * dev * dev) / n
        if n >= 3 and m2 > 0:
            out["skew"] = (m3 / (m2 * math.sqrt(m2))) * math.sqrt(n * (n - 1)) / (n - 2)
        else:
            out["skew"] = np.nan
    else:
        out["var"] = out["std"] = out["skew"] = np.nan
    out["max"] = np.nanmax(row) if n >= 1 else np.nan
    out["min"] = np.nanmin(row) if n >= 1 else np.nan
    return out


class TestRollingStats:
    def test_hand_case(self):
        out = rolling_stats(np.array([1.0, 2.0, 3.0]), [3], ["mean", "max", "min", "var", "std", "skew"])
        assert out["roll3_mean"][2] == 2.0
        assert out["roll3_max"][2] == 3.0
        assert out["roll3_min"][2] == 1.0
        assert out["roll3_var"][2] == 1.0
        assert out["roll3_std"][2] == 1.0
        assert out["roll3_skew"][2] == 0.0

    def test_constant_series_degenerate_dispersion(self):
        out = rolling_stats(np.full(20, 5.0), [5], ["std", "skew"])
        assert out["roll5_std"][10] == 0.0
        assert np.isnan(out["roll5_skew"][10])  # zero variance: undefined

    def test_short_history_counts(self):
        out = rolling_stats(np.array([1.0, 2.0]), [4], ["mean", "std"])
        assert out["roll4_mean"][0] == 1.0  # one present value suffices for mean
        assert np.isnan(out["roll4_std"][0])  # dispersion needs two
        assert out["roll4_std"][1] == pytest.approx(math.sqrt(0.5))

    def test_window_too_small_for_dispersion(self):
        with pytest.raises(FeatureError):
            rolling_stats(np.ones(5), [1], ["std"])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), window=st.sampled_from([2, 5, 15, 60]))
    def test_matches_naive_recompute_exactly(self, seed, window):
        rng = np.random.default_rng(seed)
        values = rng.normal(38.6, 0.4, size=120)
        values[rng.random(120) < 0.3] = np.nan
        out = rolling_stats(values, [window], ["mean", "std", "max", "min", "var", "skew"])
        for t in range(values.size):
            naive = naive_window_stats(values, window, t)
            for stat in ("mean", "std", "max", "min", "var", "skew"):
                got = out[f"roll{window}_{stat}"][t]
                want = naive[stat]
                if np.isnan(want):
                    assert np.isnan(got), (t, stat)
                else:
                    assert got == want, (t, stat, got, want)


class TestTemporalEncoding:
    def test_midnight(self):
        out = temporal_encoding(np.array([0]))
        assert out["sin_hour"][0] == pytest.approx(0.0, abs=1e-12)
        assert out["cos_hour"][0] == pytest.approx(1.0, abs=1e-12)

    def test_six_am(self):
        out = temporal_encoding(np.array([6 * 60]))
        assert out["sin_hour"][0] == pytest.approx(1.0, abs=1e-12)
        assert out["cos_hour"][0] == pytest.approx(0.0, abs=1e-12)

    def test_continuity_at_midnight(self):
        before = temporal_encoding(np.array([23 * 60 + 59]))
        after = temporal_encoding(np.array([24 * 60 + 1]))
        gap = math.hypot(
            before["sin_hour"][0] - after["sin_hour"][0],
            before["cos_hour"][0] - after["cos_hour"][0],
        )
        assert gap < 0.01

    def test_day_of_week(self):
        monday = Timestamp.from_iso("2024-06-03T10:00").epoch_minutes
        out = temporal_encoding(np.array([monday]))
        assert out["day_of_week"][0] == 0.0


class TestDerivatives:
    def test_constant_cbt_zero_derivative(self):
        out = physiological_derivatives(np.full(10, 38.6), np.full(10, 70.0))
        assert np.isnan(out["dcbt_dt"][0])
        assert (out["dcbt_dt"][1:] == 0.0).all()

    def test_mixed_unit_differential(self):
        out = physiological_derivatives(np.array([38.6]), np.array([70.0]))
        assert out["cbt_minus_thi"][0] == pytest.approx(-31.4)

    def test_missing_propagates(self):
        cbt = np.array([38.5, np.nan, 38.7])
        out = physiological_derivatives(cbt, np.full(3, 70.0))
        assert np.isnan(out["dcbt_dt"][1])
        assert np.isnan(out["dcbt_dt"][2])  # previous minute missing


class TestCumulativeStress:
    def test_all_below(self):
        assert (cumulative_stress(np.full(50, 38.0), 38.8) == 0).all()

    def test_excursion_counted(self):
        cbt = np.full(100, 38.0)
        cbt[40:50] = 39.0
        out = cumulative_stress(cbt, 38.8)
        assert out[-1] == 10.0

    def test_nondecreasing_with_missing(self):
        rng = np.random.default_rng(0)
        cbt = rng.normal(38.8, 0.3, 200)
        cbt[rng.random(200) < 0.2] = np.nan
        out = cumulative_stress(cbt, 38.8)
        assert (np.diff(out) >= 0).all()

    def test_boundary_strict(self):
        assert cumulative_stress(np.array([38.8]), 38.8)[0] == 0.0


class TestCrossModal:
    def test_spreadsheet_fixture(self):
        # hand-computed expected table
        thi_in = np.array([70.0, 71.0, 72.0, 73.0])
        thi_out = np.array([68.0, 70.0, 72.0, 75.0])
        cbt = np.array([38.5, 38.6, 38.7, 38.8])
        activity = np.array([0.5, 1.0, 0.0, 2.0])
        x = np.array([10.0, 13.0, 13.0, 49.0])
        y = np.array([5.0, 9.0, 9.0, 29.0])
        speed, zone = uwb_speed_and_zone(x, y)
        assert np.isnan(speed[0])
        assert speed[1] == pytest.approx(5.0)
        assert speed[2] == 0.0
        assert speed[3] == pytest.approx(math.sqrt(1696.0))
        assert list(zone) == [0.0, 5.0, 5.0, 15.0]
        out = cross_modal_features(thi_in, thi_out, cbt, activity, speed, zone)
        assert list(out["thi_gap_indoor_outdoor"]) == [2.0, 1.0, 0.0, -2.0]
        assert out["cbt_x_activity"] == pytest.approx([19.25, 38.6, 0.0, 77.6])
        assert np.isnan(out["uwb_speed_x_zone"][0])
        assert out["uwb_speed_x_zone"][1] == pytest.approx(25.0)
        assert out["uwb_speed_x_zone"][3] == pytest.approx(math.sqrt(1696.0) * 15)
        assert out["activity_x_cbt_thi_gap"] == pytest.approx([-15.75, -32.4, 0.0, -68.4])

    def test_equal_thi_zero_gap(self):
        out = cross_modal_features(
            np.array([70.0]), np.array([70.0]), np.array([38.6]),
            np.array([1.0]), np.array([0.5]), np.array([3.0]),
        )
        assert out["thi_gap_indoor_outdoor"][0] == 0.0

    def test_zero_activity_annihilates(self):
        out = cross_modal_features(
            np.array([70.0]), np.array([68.0]), np.array([38.6]),
            np.array([0.0]), np.array([1.0]), np.array([2.0]),
        )
        assert out["cbt_x_activity"][0] == 0.0


def make_frame(n=400, seed=0, start=0):
    rng = np.random.default_rng(seed)
    mask = np.ones(n, dtype=bool)

    def ch(values, unit="", missing=0.0):
        m = mask.copy() if missing == 0 else rng.random(n) > missing
        return Channel(np.nan_to_num(values), m & ~np.isnan(values), unit)

    thi = 70 + 5 * np.sin(2 * np.pi * np.arange(n) / 1440)
    cbt = 38.6 + 0.2 * np.sin(2 * np.pi * np.arange(n) / 720) + rng.normal(0, 0.05, n)
    act = rng.choice([0.1, 1.0, 3.0], n)
    channels = {
        Modality.CBT: (ch(cbt, "degC", 0.1),),
        Modality.THI: (ch(thi, "index"),),
        Modality.IMMU: tuple(
            [ch(act + rng.normal(0, 0.1, n), "m/s2", 0.05) for _ in range(3)]
            + [ch(rng.normal(30, 5, n), "deg", 0.05) for _ in range(3)]
        ),
        Modality.UWB: tuple(ch(rng.uniform(0, b, n), "m", 0.05) for b in (50, 30, 2)),
        Modality.PRESSURE: (ch(rng.normal(1013, 0.5, n), "hPa", 0.05),),
        Modality.ANKLE: (ch(rng.normal(30, 10, n), "deg", 0.05),),
        Modality.WEATHER: tuple(
            ch(rng.normal(m, 2, n), u, 0.02)
            for m, u in ((22, "degC"), (60, "pct"), (2, "m/s"), (300, "W/m2"), (68, "index"))
        ),
        Modality.MILK: (Channel(np.full(n, 30.0), np.ones(n, bool), "kg"),),
    }
    return AlignedFrame(cow="c1", start=Timestamp(start), channels=channels)


class TestAssemble:
    def test_structure_groups_partition_columns(self):
        frame = make_frame(300)
        dt = run_twin(frame)
        fm = assemble(frame, dt, horizon=120)
        manifest = [c for g in fm.groups for c in g.columns]
        assert len(manifest) == len(set(manifest)) == len(fm.columns)
        assert [g.name for g in fm.groups] == [
            "phys_cbt", "behav_ankle", "behav_immu", "behav_uwb",
            "env_weather", "prod_milk", "global_time", "dt_features",
        ]

    def test_labels_definition(self):
        frame = make_frame(400)
        fm = assemble(frame, None, horizon=120)
        cbt = frame.channel(Modality.CBT).to_float_nan()
        for t in (0, 57, 279):
            want = cbt[t + 120]
            got = fm.label_cbt_future[t]
            assert (np.isnan(want) and np.isnan(got)) or got == want
        assert np.isnan(fm.label_cbt_future[280:]).all()  # horizon edge

    def test_without_dt_group(self):
        fm = assemble(make_frame(200), None)
        assert "dt_features" not in [g.name for g in fm.groups]

    def test_dt_from_frame_channels(self):
        from herdtwin.twin import attach_dt_features

        frame = make_frame(200)
        enriched = attach_dt_features(frame, run_twin(frame))
        fm = assemble(enriched, None)
        assert "dt_features" in [g.name for g in fm.groups]
        assert "dt_future_cbt" in fm.columns

    def test_causality_under_truncation(self):
        frame = make_frame(500, seed=3)
        full = assemble(frame, None, horizon=120)
        for cut in (30, 233, 499):
            window = slice_window(frame, Timestamp(cut), cut + 1)
            part = assemble(window, None, horizon=120)
            for name, col in part.columns.items():
                ref = full.columns[name][: cut + 1]
                same = (col == ref) | (np.isnan(col) & np.isnan(ref))
                assert same.all(), name

    def test_pooling(self):
        frames = [make_frame(200, seed=1), make_frame(200, seed=2)]
        mats = []
        for i, f in enumerate(frames):
            fm = assemble(f, None)
            fm.cow = f"c{i + 1}"
            mats.append(fm)
        pooled = PooledMatrix.from_matrices(mats)
        assert pooled.n_rows == 400
        assert set(pooled.cow_ids) == {"c1", "c2"}
        sub = pooled.subset(pooled.cow_ids == "c1")
        assert sub.n_rows == 200

    def test_without_group(self):
        fm = assemble(make_frame(150), run_twin(make_frame(150)))
        pooled = PooledMatrix.from_matrices([fm])
        reduced = pooled.without_group("dt_features")
        assert "dt_future_cbt" not in reduced.columns
        assert len(reduced.groups) == len(pooled.groups) - 1


class TestFeatureIO:
    def test_round_trip(self, tmp_path):
        frame = make_frame(150)
        fm = assemble(frame, run_twin(frame))
        path = tmp_path / "c1.twinfeat"
        write_features(fm, path)
        again = read_features(path)
        assert again.cow == fm.cow
        assert [g.name for g in again.groups] == [g.name for g in fm.groups]
        for name, col in fm.columns.items():
            other = again.columns[name]
            same = (col == other) | (np.isnan(col) & np.isnan(other))
            assert same.all(), name

    def test_delimited_export(self):
        fm = assemble(make_frame(50), None)
        text = to_delimited(fm)
        lines = text.splitlines()
        assert len(lines) == 51
        assert lines[0].startswith("t_utc,cbt,")

    def test_partition_validation(self):
        with pytest.raises(FeatureError):
            FeatureMatrix(
                cow="c1",
                timestamps=np.arange(3),
                columns={"a": np.zeros(3)},
                groups=[FeatureGroup("g1", ("a",)), FeatureGroup("g2", ("a",))],
                label_cbt_future=np.zeros(3),
                label_stress=np.zeros(3),
            )
