"""Event data model: parsing, binary round trips, windowing, voxel
encoding, normalization, and CFA splitting."""

import numpy as np
import pytest

from evrec.events import (EventFormatError, EventStream, EventTensor, EventWindow,
                          encode_voxel_grid, normalize_tensor, parse_event_text,
                          read_event_binary, split_cfa, window_by_count,
                          window_by_duration, write_event_binary)


def random_stream(rng, n=1000, width=240, height=180):
    t = np.sort(rng.uniform(0.0, 1.0, n))
    return EventStream.from_arrays(width, height, t,
                                   rng.integers(0, width, n),
                                   rng.integers(0, height, n),
                                   rng.choice([-1, 1], n))


# -- text format --------------------------------------------------------------

def test_parse_single_record():
    s = parse_event_text("240 180\n0.10 5 7 1")
    assert (s.width, s.height, len(s)) == (240, 180, 1)
    assert s.t[0] == 0.10 and s.x[0] == 5 and s.y[0] == 7 and s.p[0] == 1


def test_parse_out_of_bounds_reports_line():
    with pytest.raises(EventFormatError, match="line 2"):
        parse_event_text("240 180\n0.1 300 7 1")


def test_parse_polarity_zero_maps_to_minus_one():
    s = parse_event_text("10 10\n0.1 1 1 0")
    assert s.p[0] == -1


def test_parse_timestamp_decrease_rejected():
    with pytest.raises(EventFormatError, match="line 3"):
        parse_event_text("10 10\n0.2 1 1 1\n0.1 1 1 1")


@pytest.mark.parametrize("bad", [
    "0.1 1 1",            # missing field
    "0.1 1 1 1 9",        # extra field
    "x 1 1 1",            # non-numeric time
    "0.1 1.5 1 1",        # non-integer coordinate
    "0.1 1 1 2",          # invalid polarity
    "0.1 -1 1 1",         # negative coordinate
])
def test_parse_rejects_grammar_mutations(bad):
    with pytest.raises(EventFormatError, match="line 2"):
        parse_event_text(f"10 10\n{bad}")


def test_parse_bad_header():
    with pytest.raises(EventFormatError, match="line 1"):
        parse_event_text("240\n0.1 1 1 1")


# -- binary format ------------------------------------------------------------

def test_binary_empty_stream_is_header_only():
    data = write_event_binary(EventStream.empty(240, 180))
    assert len(data) == 16
    back = read_event_binary(data)
    assert len(back) == 0 and back.width == 240


def test_binary_round_trip_identity(rng):
    s = random_stream(rng)
    back = read_event_binary(write_event_binary(s))
    assert back.width == s.width and back.height == s.height
    np.testing.assert_array_equal(back.t, s.t)
    np.testing.assert_array_equal(back.x, s.x)
    np.testing.assert_array_equal(back.y, s.y)
    np.testing.assert_array_equal(back.p, s.p)


def test_binary_truncation_detected(rng):
    s = random_stream(rng, n=5)
    data = write_event_binary(s)
    with pytest.raises(EventFormatError, match="truncated"):
        read_event_binary(data[:16 + 3 * 13])


def test_binary_bad_magic():
    with pytest.raises(EventFormatError, match="magic"):
        read_event_binary(b"NOPE" + bytes(12))


# -- windowing ----------------------------------------------------------------

def test_window_by_count_exact_fit(rng):
    s = random_stream(rng, n=7)
    windows = window_by_count(s, 7)
    assert len(windows) == 1 and len(windows[0]) == 7


def test_window_by_count_drops_remainder(rng):
    s = random_stream(rng, n=10)
    windows = window_by_count(s, 4)
    assert [len(w) for w in windows] == [4, 4]


def test_window_by_count_too_few(rng):
    assert window_by_count(random_stream(rng, n=3), 5) == []
    with pytest.raises(ValueError):
        window_by_count(random_stream(rng, n=3), 0)


def test_window_by_count_partition_is_stream_prefix(rng):
    s = random_stream(rng, n=103)
    windows = window_by_count(s, 10)
    concat_t = np.concatenate([w.events.t for w in windows])
    np.testing.assert_array_equal(concat_t, s.t[:100])
    ends = [w.t_end for w in windows]
    starts = [w.t_start for w in windows]
    assert all(starts[i + 1] >= ends[i] for i in range(len(windows) - 1))


def test_window_by_duration_half_open():
    s = EventStream.from_arrays(10, 10, [0.0, 0.04, 0.06], [0, 1, 2], [0, 0, 0],
                                [1, 1, 1])
    windows = window_by_duration(s, 0.05)
    assert [len(w) for w in windows] == [2, 1]


def test_window_by_duration_middle_empties():
    s = EventStream.from_arrays(10, 10, [0.0, 0.01, 0.26], [0, 1, 2], [0, 0, 0],
                                [1, 1, 1])
    windows = window_by_duration(s, 0.05)
    assert [len(w) for w in windows] == [2, 0, 0, 0, 0, 1]


def test_window_by_duration_ten_windows_on_50ms():
    t = np.arange(0.0, 0.05, 0.001)
    s = EventStream.from_arrays(10, 10, t, np.zeros(len(t), int),
                                np.zeros(len(t), int), np.ones(len(t), int))
    assert len(window_by_duration(s, 0.005)) == 10
    with pytest.raises(ValueError):
        window_by_duration(s, 0.0)


# -- voxel grid ---------------------------------------------------------------

def _window(t, x, y, p, width=4, height=4):
    s = EventStream.from_arrays(width, height, t, x, y, p)
    return EventWindow(s, float(s.t[0]), float(s.t[-1]))


def test_voxel_endpoints_map_to_first_and_last_bin():
    w = _window([0.0, 1.0], [0, 1], [0, 0], [1, 1])
    grid = encode_voxel_grid(w, 5, 4, 4).values
    assert grid[0, 0, 0] == 1.0
    assert grid[4, 0, 1] == 1.0
    assert grid.sum() == 2.0


def test_voxel_bilinear_split():
    w = _window([0.0, 0.375, 1.0], [0, 2, 1], [0, 0, 0], [1, 1, 1])
    grid = encode_voxel_grid(w, 5, 4, 4).values
    # middle event: t* = 4 * 0.375 = 1.5 -> half in bin 1, half in bin 2
    assert grid[1, 0, 2] == pytest.approx(0.5)
    assert grid[2, 0, 2] == pytest.approx(0.5)


def test_voxel_conservation_oracle(rng):
    """Sum of voxels equals sum of polarities; full grid matches a per-event
    direct-summation oracle."""
    n, width, height, bins = 1000, 16, 12, 5
    t = np.sort(rng.uniform(0.0, 0.2, n))
    x = rng.integers(0, width, n)
    y = rng.integers(0, height, n)
    p = rng.choice([-1, 1], n)
    w = _window(t, x, y, p, width, height)
    grid = encode_voxel_grid(w, bins, height, width).values

    oracle = np.zeros((bins, height, width))
    dt = t[-1] - t[0]
    for ti, xi, yi, pi in zip(t, x, y, p):
        tstar = (bins - 1) * (ti - t[0]) / dt
        for b in range(bins):
            oracle[b, yi, xi] += pi * max(0.0, 1.0 - abs(b - tstar))
    np.testing.assert_allclose(grid, oracle, atol=1e-5)
    assert abs(grid.sum() - p.sum()) <= 1e-9 * max(abs(p.sum()), 1)


def test_voxel_weight_partition_property(rng):
    """The two nearest-bin weights sum to 1 for any t* in [0, B-1]."""
    bins = 5
    for tstar in rng.uniform(0.0, bins - 1, 200):
        w = sum(max(0.0, 1.0 - abs(b - tstar)) for b in range(bins))
        assert w == pytest.approx(1.0, abs=1e-12)


def test_voxel_simultaneous_events_bin_zero():
    w = _window([0.5, 0.5, 0.5], [0, 1, 2], [0, 0, 0], [1, -1, 1])
    grid = encode_voxel_grid(w, 5, 4, 4).values
    assert grid[0].sum() == 1.0
    assert grid[1:].sum() == 0.0


def test_voxel_empty_window_is_error():
    w = EventWindow(EventStream.empty(4, 4), 0.0, 1.0)
    with pytest.raises(ValueError):
        encode_voxel_grid(w, 5, 4, 4)
    assert EventTensor.zeros(5, 4, 4).values.sum() == 0.0


# -- normalization ------------------------------------------------------------

def test_normalize_two_point():
    t = EventTensor(np.array([[[2.0, 0.0], [0.0, 4.0]]]))
    out = normalize_tensor(t).values
    assert out[0, 0, 0] == pytest.approx(-1.0)
    assert out[0, 1, 1] == pytest.approx(1.0)
    assert out[0, 0, 1] == 0.0


def test_normalize_all_zero_unchanged():
    t = EventTensor(np.zeros((2, 3, 3)))
    assert normalize_tensor(t).values.sum() == 0.0


def test_normalize_degenerate_std_guard():
    t = EventTensor(np.array([[[5.0, 0.0], [0.0, 0.0]]]))
    assert normalize_tensor(t).values.sum() == 0.0


def test_normalize_population_statistics(rng):
    vals = np.zeros((5, 8, 8), np.float64)
    mask = rng.random((5, 8, 8)) < 0.4
    vals[mask] = rng.uniform(1.0, 3.0, mask.sum())
    out = normalize_tensor(EventTensor(vals)).values
    nz = out[mask]
    assert nz.mean() == pytest.approx(0.0, abs=1e-9)
    assert nz.std() == pytest.approx(1.0, abs=1e-9)
    assert np.all(out[~mask] == 0.0)


# -- CFA splitting ------------------------------------------------------------

def test_cfa_routes_phase_00():
    s = EventStream.from_arrays(4, 4, [0.1], [0], [0], [1])
    subs = split_cfa(s, "RGGB")
    assert len(subs[(0, 0)]) == 1
    assert subs[(0, 0)].x[0] == 0 and subs[(0, 0)].y[0] == 0


def test_cfa_coordinate_halving():
    s = EventStream.from_arrays(8, 8, [0.1], [3], [2], [1])
    subs = split_cfa(s, "RGGB")
    sub = subs[(1, 0)]
    assert len(sub) == 1 and sub.x[0] == 1 and sub.y[0] == 1


def test_cfa_is_partition(rng):
    s = random_stream(rng, n=500, width=32, height=24)
    subs = split_cfa(s, "RGGB")
    assert sum(len(v) for v in subs.values()) == len(s)
    # restore coordinates and compare the multisets of events
    restored = []
    for (px, py), sub in subs.items():
        for t, x, y, p in zip(sub.t, sub.x, sub.y, sub.p):
            restored.append((t, 2 * x + px, 2 * y + py, p))
    original = sorted(zip(s.t, s.x, s.y, s.p))
    assert sorted(restored) == original
    for sub in subs.values():
        assert np.all(np.diff(sub.t) >= 0)


def test_cfa_odd_dimensions_rejected():
    s = EventStream.from_arrays(5, 4, [0.1], [0], [0], [1])
    with pytest.raises(ValueError):
        split_cfa(s, "RGGB")
