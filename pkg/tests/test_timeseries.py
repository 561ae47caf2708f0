import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdtwin.timeseries import (
    AlignedFrame,
    BoundsError,
    Channel,
    IdentityError,
    Modality,
    ResolutionError,
    SpanError,
    TimeSeriesError,
    Timestamp,
    merge_frames,
    slice_window,
)


def cbt_frame(cow, start_min, values, mask=None):
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.ones(values.size, dtype=bool)
    ch = Channel(values, np.asarray(mask, dtype=bool), "degC")
    return AlignedFrame(cow=cow, start=Timestamp(start_min), channels={Modality.CBT: (ch,)})


class TestTimestamp:
    def test_iso_round_trip(self):
        t = Timestamp.from_iso("2024-06-01T12:34")
        assert t.iso() == "2024-06-01T12:34"

    def test_seconds_truncate_to_minutes(self):
        assert Timestamp.from_iso("2024-06-01T12:34:59") == Timestamp.from_iso("2024-06-01T12:34")

    def test_arithmetic(self):
        t = Timestamp(1000)
        assert t + 5 == Timestamp(1005)
        assert (t + 5) - t == 5
        assert t - 3 == Timestamp(997)

    def test_ordering(self):
        assert Timestamp(1) < Timestamp(2) <= Timestamp(2)

    def test_day_of_week_epoch_is_thursday(self):
        assert Timestamp(0).day_of_week == 3
        assert Timestamp.from_iso("2024-06-03T00:00").day_of_week == 0  # a Monday

    def test_hour_float(self):
        assert Timestamp.from_iso("2024-06-01T06:30").hour_float == 6.5


class TestChannel:
    def test_absent_slots_normalized(self):
        ch = Channel(np.array([1.0, 7.0]), np.array([True, False]))
        assert ch.values[1] == 0.0
        assert ch.value_at(1) is None
        assert ch.value_at(0) == 1.0

    def test_nan_at_present_slot_rejected(self):
        with pytest.raises(TimeSeriesError):
            Channel(np.array([np.nan]), np.array([True]))

    def test_nan_at_absent_slot_tolerated(self):
        ch = Channel(np.array([np.nan]), np.array([False]))
        assert ch.values[0] == 0.0

    def test_immutable(self):
        ch = Channel(np.array([1.0]), np.array([True]))
        with pytest.raises(ValueError):
            ch.values[0] = 2.0

    def test_from_optional(self):
        ch = Channel.from_optional([1.0, None, 3.0])
        assert list(ch.mask) == [True, False, True]
        assert np.isnan(ch.to_float_nan()[1])


class TestAlignedFrame:
    def test_missing_flags_derived(self):
        f = cbt_frame("c1", 0, [38.0, 38.1, 38.2], mask=[True, False, True])
        flags = f.missing_flags[Modality.CBT]
        assert list(flags) == [False, True, False]

    def test_time_since_obs(self):
        f = cbt_frame("c1", 0, [0, 0, 38.0, 0, 0, 38.1], mask=[0, 0, 1, 0, 0, 1])
        assert list(f.time_since_obs[Modality.CBT]) == [1, 2, 0, 1, 2, 0]

    def test_channel_count_enforced(self):
        ch = Channel(np.zeros(3), np.ones(3, dtype=bool))
        with pytest.raises(TimeSeriesError):
            AlignedFrame(cow="c1", start=Timestamp(0), channels={Modality.UWB: (ch,)})

    def test_empty_cow_rejected(self):
        ch = Channel(np.zeros(3), np.ones(3, dtype=bool))
        with pytest.raises(IdentityError):
            AlignedFrame(cow="", start=Timestamp(0), channels={Modality.CBT: (ch,)})

    def test_length_mismatch_rejected(self):
        a = Channel(np.zeros(3), np.ones(3, dtype=bool))
        b = Channel(np.zeros(4), np.ones(4, dtype=bool))
        with pytest.raises(TimeSeriesError):
            AlignedFrame(
                cow="c1",
                start=Timestamp(0),
                channels={Modality.CBT: (a,), Modality.THI: (b,)},
            )

    @settings(max_examples=60, deadline=None)
    @given(mask=st.lists(st.booleans(), min_size=1, max_size=40))
    def test_tso_zero_iff_present(self, mask):
        f = cbt_frame("c1", 0, np.arange(len(mask), dtype=float) + 38.0, mask=mask)
        tso = f.time_since_obs[Modality.CBT]
        flags = f.missing_flags[Modality.CBT]
        assert np.array_equal(tso == 0, ~flags)
        assert (tso >= 0).all()


class TestSliceWindow:
    def test_identity(self):
        f = cbt_frame("c1", 100, np.linspace(38, 39, 10))
        assert slice_window(f, Timestamp(109), 10) == f

    def test_prefix(self):
        f = cbt_frame("c1", 100, np.arange(10, dtype=float))
        w = slice_window(f, Timestamp(104), 5)
        assert w.start == Timestamp(100)
        assert list(w.channel(Modality.CBT).values) == [0, 1, 2, 3, 4]

    def test_underflow(self):
        f = cbt_frame("c1", 100, np.arange(10, dtype=float))
        with pytest.raises(BoundsError, match="1970|precedes"):
            slice_window(f, Timestamp(102), 5)

    def test_out_of_span_names_timestamp(self):
        f = cbt_frame("c1", 100, np.arange(10, dtype=float))
        with pytest.raises(BoundsError, match=Timestamp(110).iso()):
            slice_window(f, Timestamp(110), 5)

    def test_nested_slices_compose(self):
        f = cbt_frame("c1", 0, np.arange(20, dtype=float), mask=np.arange(20) % 3 != 0)
        outer = slice_window(f, Timestamp(15), 12)
        inner = slice_window(outer, Timestamp(12), 6)
        direct = slice_window(f, Timestamp(12), 6)
        assert inner == direct

    def test_causal_no_future_content(self):
        f = cbt_frame("c1", 0, np.arange(10, dtype=float))
        w = slice_window(f, Timestamp(4), 5)
        assert w.end == Timestamp(4)
        assert w.length == 5


class TestMergeFrames:
    def test_disjoint_modalities_union(self):
        cbt = cbt_frame("c1", 0, [38.0, 38.1])
        thi_ch = Channel(np.array([70.0, 71.0]), np.ones(2, dtype=bool), "index")
        thi = AlignedFrame(cow="c1", start=Timestamp(0), channels={Modality.THI: (thi_ch,)})
        merged = merge_frames([cbt, thi])
        assert merged.has(Modality.CBT) and merged.has(Modality.THI)
        assert merged.length == 2

    def test_idempotent(self):
        f = cbt_frame("c1", 0, [38.0, 38.1, 38.2], mask=[1, 0, 1])
        assert merge_frames([f, f]) == f

    def test_cow_mismatch(self):
        with pytest.raises(IdentityError):
            merge_frames([cbt_frame("c1", 0, [38.0]), cbt_frame("c2", 0, [38.0])])

    def test_step_mismatch(self):
        a = cbt_frame("c1", 0, [38.0, 38.1])
        ch = Channel(np.array([38.0, 38.1]), np.ones(2, dtype=bool), "degC")
        b = AlignedFrame(cow="c1", start=Timestamp(0), channels={Modality.CBT: (ch,)}, step_minutes=5)
        with pytest.raises(ResolutionError):
            merge_frames([a, b])

    def test_gap_rejected(self):
        a = cbt_frame("c1", 0, [38.0, 38.1])
        b = cbt_frame("c1", 10, [38.5, 38.6])
        with pytest.raises(SpanError):
            merge_frames([a, b])

    def test_adjacent_spans_concatenate(self):
        a = cbt_frame("c1", 0, [38.0, 38.1])
        b = cbt_frame("c1", 2, [38.2, 38.3])
        merged = merge_frames([a, b])
        assert merged.length == 4
        assert list(merged.channel(Modality.CBT).values) == [38.0, 38.1, 38.2, 38.3]

    def test_last_write_wins(self):
        a = cbt_frame("c1", 0, [38.0, 38.1, 38.2])
        b = cbt_frame("c1", 1, [39.1, 39.2])
        merged = merge_frames([a, b])
        assert list(merged.channel(Modality.CBT).values) == [38.0, 39.1, 39.2]

    def test_later_absence_overwrites(self):
        a = cbt_frame("c1", 0, [38.0, 38.1])
        b = cbt_frame("c1", 0, [0.0, 39.1], mask=[False, True])
        merged = merge_frames([a, b])
        assert merged.channel(Modality.CBT).value_at(0) is None
        assert merged.channel(Modality.CBT).value_at(1) == 39.1

    def test_overwrite_logged(self, caplog):
        a = cbt_frame("c1", 0, [38.0, 38.1])
        with caplog.at_level("WARNING", logger="herdtwin.timeseries"):
            merge_frames([a, a])
        assert "overwritten" in caplog.text

    def test_associative_on_disjoint_modalities(self):
        cbt = cbt_frame("c1", 0, [38.0, 38.1])
        thi = AlignedFrame(
            cow="c1",
            start=Timestamp(0),
            channels={Modality.THI: (Channel(np.array([70.0, 71.0]), np.ones(2, dtype=bool), "index"),)},
        )
        ankle = AlignedFrame(
            cow="c1",
            start=Timestamp(0),
            channels={Modality.ANKLE: (Channel(np.array([1.0, 2.0]), np.ones(2, dtype=bool), "deg"),)},
        )
        left = merge_frames([merge_frames([cbt, thi]), ankle])
        right = merge_frames([cbt, merge_frames([thi, ankle])])
        assert left == right
