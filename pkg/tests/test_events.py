import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikegate.errors import FormatError, ValidationError
from spikegate.events import (
    HEADER,
    MAGIC,
    OFF,
    ON,
    EventStream,
    bin_indices,
    bin_to_frames,
    parse_event_file,
    read_event_file,
    serialize_binary,
    serialize_csv,
    synth_flicker,
    synth_moving_bar,
    synth_noise,
    write_event_file,
)


def _binary(width, height, records):
    body = b"".join(struct.pack("<IHHB", *r) for r in records)
    return HEADER.pack(MAGIC, width, height, len(records)) + body


class TestParse:
    def test_single_binary_record(self):
        raw = _binary(4, 4, [(5, 1, 2, 1)])
        s = parse_event_file(raw)
        assert (s.width, s.height, len(s)) == (4, 4, 1)
        assert list(s.events) == [(5, 1, 2, 1)]

    def test_binary_hex_layout(self):
        raw = _binary(4, 4, [(5, 1, 2, 1)])
        assert raw.hex() == "53504b31" "0400" "0400" "01000000" "05000000" "0100" "0200" "01"

    def test_empty_csv(self):
        s = parse_event_file(b"t,x,y,p\n", width=4, height=4)
        assert len(s) == 0

    def test_csv_is_sorted_stably(self):
        raw = b"# width=4 height=4\nt,x,y,p\n10,0,0,1\n3,1,0,1\n7,2,0,0\n3,3,3,0\n"
        s = parse_event_file(raw)
        assert s.t.tolist() == [3, 3, 7, 10]
        assert s.x.tolist() == [1, 3, 2, 0]  # equal stamps keep file order

    def test_binary_rejects_decreasing_time(self):
        raw = _binary(4, 4, [(10, 0, 0, 1), (3, 0, 0, 1), (7, 0, 0, 1)])
        with pytest.raises(ValidationError, match="record 1"):
            parse_event_file(raw)

    def test_out_of_range_names_record(self):
        raw = _binary(4, 4, [(1, 0, 0, 1), (2, 4, 0, 1)])
        with pytest.raises(ValidationError, match="record 1"):
            parse_event_file(raw)

    @pytest.mark.parametrize("raw", [b"SPK2\x00", b"hello\n1,2,3,4\n", b"SPK1\x04\x00"])
    def test_bad_magic_or_header(self, raw):
        with pytest.raises(FormatError):
            parse_event_file(raw)

    def test_truncated_body(self):
        raw = _binary(4, 4, [(1, 0, 0, 1)])[:-2]
        with pytest.raises(FormatError):
            parse_event_file(raw)

    def test_bad_polarity(self):
        with pytest.raises(ValidationError, match="polarity"):
            parse_event_file(b"t,x,y,p\n1,0,0,2\n", 4, 4)

    def test_csv_geometry_inferred(self):
        s = parse_event_file(b"t,x,y,p\n1,3,1,0\n")
        assert (s.width, s.height) == (4, 2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 7), st.integers(0, 5),
                          st.integers(0, 1)), max_size=30))
def test_round_trip_both_formats(records):
    s = EventStream.from_events(8, 6, records)
    assert parse_event_file(serialize_binary(s)) == s
    assert parse_event_file(serialize_csv(s)) == s


def test_file_round_trip(tmp_path):
    s = synth_moving_bar((16, 8), 30.0, 0.2, noise_rate=5.0, seed=2)
    for name in ("a.spk", "a.csv"):
        write_event_file(tmp_path / name, s)
        assert read_event_file(tmp_path / name) == s


class TestSynth:
    def test_static_bar_has_only_initial_transient(self):
        s = synth_moving_bar((16, 8), 0.0, 1.0, noise_rate=0.0)
        assert set(s.t.tolist()) == {0}
        assert len(s) == 2 * 8  # bar_width columns x height rows

    def test_deterministic(self):
        a = synth_moving_bar((32, 32), 25.0, 0.5, noise_rate=10.0, seed=9)
        b = synth_moving_bar((32, 32), 25.0, 0.5, noise_rate=10.0, seed=9)
        assert serialize_binary(a) == serialize_binary(b)

    def test_poisson_noise_count(self):
        s = synth_noise((32, 32), 100.0, 1.0, seed=0)
        mean = 100.0 * 32 * 32
        assert abs(len(s) - mean) <= 3 * math.sqrt(mean)

    def test_edges_have_polarity(self):
        s = synth_moving_bar((16, 4), 10.0, 0.35, bar_width=2)
        later = s.t > 0
        on_x = s.x[later & (s.p == ON)]
        off_x = s.x[later & (s.p == OFF)]
        # the leading edge is always two columns ahead of the trailing edge
        assert np.array_equal(np.unique(on_x) - 2, np.unique(off_x))

    def test_zero_area(self):
        with pytest.raises(ValidationError):
            synth_moving_bar((0, 4), 1.0, 1.0)

    def test_flicker_counts(self):
        s = synth_flicker((8, 8), (1, 2, 3, 2), [10, 20], fill=1.0)
        assert len(s) == 12 and set(s.t.tolist()) == {10, 20}


class TestBinning:
    def test_single_event(self):
        s = EventStream.from_events(2, 2, [(5, 0, 0, 1)])
        f = bin_to_frames(s, 1)
        assert f.shape == (1, 2, 2, 2) and f.sum() == 1 and f[0, 1, 0, 0] == 1

    def test_binary_clamp(self):
        s = EventStream.from_events(2, 2, [(1, 1, 1, 1)] * 3)
        assert bin_to_frames(s, 1).max() == 1

    def test_deciles(self):
        t = np.arange(0, 100, 10)
        s = EventStream.from_events(1, 1, [(int(v), 0, 0, 1) for v in t])
        f = bin_to_frames(s, 10)
        assert f[:, 1, 0, 0].tolist() == [1] * 10
        assert bin_indices(t, 10).tolist() == list(range(10))

    def test_block_max_downsampling(self):
        s = EventStream.from_events(4, 4, [(0, 3, 3, 0), (9, 0, 0, 1)])
        f = bin_to_frames(s, 2, 2, 2)
        assert f[0, 0, 1, 1] == 1 and f[1, 1, 0, 0] == 1 and f.sum() == 2

    def test_indivisible_output(self):
        with pytest.raises(ValidationError):
            bin_to_frames(EventStream.empty(4, 4), 2, 3, 4)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 5000), min_size=1, max_size=40), st.integers(1, 12))
    def test_bins_cover_range_monotone(self, ts, T):
        b = bin_indices(np.sort(np.asarray(ts)), T)
        assert b.min() >= 0 and b.max() <= T - 1
        assert np.all(np.diff(b) >= 0)
        assert b[0] == 0
