import numpy as np
import pytest
from hypothesis import given, settings

from eventrpg.events import (
    Event,
    EventBoundsError,
    EventFormatError,
    EventStream,
    PolarityError,
    parse_events,
    read_events_file,
    time_bins,
    to_frames,
    write_events,
    write_events_file,
)

from conftest import random_stream, streams


class TestParse:
    def test_single_csv_line(self):
        s = parse_events(b"3,4,100,1", "csv", 10, 10)
        assert list(s) == [Event(3, 4, 100, 1)]

    def test_empty_body(self):
        s = parse_events(b"", "csv", 10, 10)
        assert len(s) == 0 and (s.width, s.height) == (10, 10)

    def test_bounds_error_names_coordinate(self):
        with pytest.raises(EventBoundsError, match="x=12"):
            parse_events(b"12,0,5,1", "csv", 10, 10)

    def test_header_is_optional(self):
        assert parse_events(b"x,y,t,p\n1,2,3,0\n", "csv", 4, 4) == parse_events(b"1,2,3,0", "csv", 4, 4)

    def test_geometry_inferred(self):
        s = parse_events(b"5,2,0,1\n1,7,1,0\n", "csv")
        assert (s.width, s.height) == (6, 8)

    def test_malformed_line_reports_line_number(self):
        with pytest.raises(EventFormatError) as exc:
            parse_events(b"1,1,1,1\n1,1,x,0\n", "csv", 4, 4)
        assert exc.value.line == 2

    def test_polarity_checked(self):
        with pytest.raises(PolarityError):
            parse_events(b"1,1,1,2", "csv", 4, 4)

    def test_unsorted_input_is_stably_sorted(self):
        s = parse_events(b"0,0,5,1\n1,0,2,0\n2,0,2,1\n", "csv", 4, 4)
        assert s.t.tolist() == [2, 2, 5] and s.x.tolist() == [1, 2, 0]

    def test_truncated_bin(self):
        raw = write_events(EventStream.from_events([(1, 1, 1, 1), (2, 2, 2, 0)], 4, 4), "bin")
        with pytest.raises(EventFormatError):
            parse_events(raw[:-3], "bin")

    def test_bin_bad_magic(self):
        with pytest.raises(EventFormatError, match="magic"):
            parse_events(b"XXXX" + bytes(16), "bin")


class TestWrite:
    def test_one_event_is_one_data_line(self):
        text = write_events(EventStream.from_events([(3, 4, 100, 1)], 10, 10), "csv").decode()
        assert text.splitlines() == ["x,y,t,p", "3,4,100,1"]

    def test_empty_stream_is_header_only(self):
        assert write_events(EventStream.empty(3, 3), "csv").decode().splitlines() == ["x,y,t,p"]

    @pytest.mark.parametrize("fmt", ["csv", "bin"])
    def test_round_trip_1000_random(self, fmt):
        s = random_stream(np.random.default_rng(0), 64, 48, 1000)
        back = parse_events(write_events(s, fmt), fmt, 64, 48)
        assert back == s

    @settings(max_examples=60, deadline=None)
    @given(streams())
    def test_round_trip_property(self, s):
        assert parse_events(write_events(s, "bin"), "bin") == s
        assert parse_events(write_events(s, "csv"), "csv", s.width, s.height) == s

    def test_files_pick_format_by_extension(self, tmp_path):
        s = random_stream(np.random.default_rng(1), 8, 8, 20)
        for name in ("a.csv", "a.bin", "a.evt"):
            write_events_file(s, tmp_path / name)
            assert read_events_file(tmp_path / name, 8, 8) == s
        assert (tmp_path / "a.bin").read_bytes()[:4] == b"EVT1"


class TestFrames:
    def test_hand_binned_pair(self):
        s = EventStream.from_events([(0, 0, 0, 1), (0, 0, 9, 0)], 1, 1, duration=10)
        d = to_frames(s, 2, 1, 1).data
        expected = np.zeros((2, 2, 1, 1))
        expected[0, 1, 0, 0] = 1
        expected[1, 0, 0, 0] = 1
        np.testing.assert_array_equal(d, expected)

    def test_empty_stream_all_zero(self):
        d = to_frames(EventStream.empty(5, 4), 3).data
        assert d.shape == (3, 2, 4, 5) and not d.any()

    def test_duplicates_accumulate(self):
        s = EventStream.from_events([(1, 1, 3, 1), (1, 1, 3, 1)], 4, 4)
        d = to_frames(s, 1).data
        assert d[0, 1, 1, 1] == 2 and d.sum() == 2

    def test_binarize(self):
        s = EventStream.from_events([(1, 1, 3, 1), (1, 1, 3, 1)], 4, 4)
        assert to_frames(s, 1, binarize=True).data.max() == 1

    def test_time_bins_without_duration_span_min_to_max(self):
        s = EventStream.from_events([(0, 0, 100, 1), (0, 0, 150, 1), (0, 0, 200, 1)], 1, 1)
        assert time_bins(s, 2).tolist() == [0, 1, 1]

    @settings(max_examples=60, deadline=None)
    @given(streams())
    def test_counts_preserved_under_downsampling(self, s):
        d = to_frames(s, 3, 4, 5).data
        assert d.shape == (3, 2, 4, 5)
        assert d.sum() == len(s)
        assert d[:, 1].sum() == int(s.p.sum())
