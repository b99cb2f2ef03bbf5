import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sttis.errors import DataError
from sttis.ingest import (
    FlowSeries, GridSpec, ScaleParams, TRIP_HEADER, apply_scale, denormalize, flow_metadata, normalize,
    parse_timestamp, parse_trips, read_flows, split, write_flows,
)

GRID = GridSpec(3, 3, bbox=(0.0, 3.0, 0.0, 3.0), slot_minutes=30)
SLOT = 1800


def centre(region: int) -> tuple[float, float]:
    row, col = divmod(region, 3)
    return row + 0.5, col + 0.5


def trip_row(src: int, dst: int, depart: float, arrive: float) -> str:
    (olat, olon), (dlat, dlon) = centre(src), centre(dst)
    return f"{olat},{olon},{dlat},{dlon},{depart},{arrive}"


def write_trips(path, rows) -> str:
    path.write_text(",".join(TRIP_HEADER) + "\n" + "\n".join(rows) + "\n")
    return str(path)


def test_grid_invariants():
    assert GRID.n == 9 and GRID.slots_per_day == 48
    with pytest.raises(ValueError):
        GridSpec(1, 1)
    with pytest.raises(ValueError):
        GridSpec(2, 2, slot_minutes=7)


def test_region_numbering_rows_from_south_min_edge_inclusive():
    lat = np.array([0.0, 0.0, 2.999, 1.5, 3.0, -0.1])
    lon = np.array([0.0, 2.5, 2.999, 0.5, 1.0, 1.0])
    np.testing.assert_array_equal(GRID.region_of(lat, lon), [0, 2, 8, 3, -1, -1])


def test_single_trip_counts(tmp_path):
    path = write_trips(tmp_path / "t.csv", [trip_row(3, 7, 5 * SLOT + 10, 6 * SLOT + 5)])
    flows, report = parse_trips(path, GRID, origin=0.0, num_slots=8)
    expected_out = np.zeros((8, 9))
    expected_out[5, 3] = 1
    expected_in = np.zeros((8, 9))
    expected_in[6, 7] = 1
    np.testing.assert_array_equal(flows.outflow, expected_out)
    np.testing.assert_array_equal(flows.inflow, expected_in)
    assert report.parsed == 1 and report.out_of_bbox == 0


def test_departures_add_up(tmp_path):
    rows = [trip_row(0, 4, 2 * SLOT, 3 * SLOT), trip_row(0, 5, 2 * SLOT + 100, 2 * SLOT + 200)]
    flows, _ = parse_trips(write_trips(tmp_path / "t.csv", rows), GRID, origin=0.0, num_slots=4)
    assert flows.outflow[2, 0] == 2
    assert flows.outflow.sum() == 2 and flows.inflow.sum() == 2


def test_iso_and_epoch_timestamps_agree():
    assert parse_timestamp("1970-01-01T00:30:00Z") == 1800.0
    assert parse_timestamp("1970-01-01T00:30:00") == 1800.0
    assert parse_timestamp("1970-01-01T01:30:00+01:00") == 1800.0
    assert parse_timestamp(" 1800 ") == 1800.0


def test_default_origin_is_midnight_before_first_trip(tmp_path):
    day = 86400 * 3
    rows = [trip_row(1, 2, day + 7 * SLOT + 1, day + 8 * SLOT + 1)]
    flows, _ = parse_trips(write_trips(tmp_path / "t.csv", rows), GRID)
    assert flows.num_slots == 9
    assert flows.outflow[7, 1] == 1 and flows.inflow[8, 2] == 1
    assert flows.start_slot_of_day == 0


def test_out_of_bbox_trips_are_dropped_and_counted(tmp_path):
    rows = ["0.5,0.5,9.0,9.0,0,10", "-1,0.5,0.5,0.5,0,10", trip_row(0, 1, 0, 10)]
    flows, report = parse_trips(write_trips(tmp_path / "t.csv", rows), GRID, origin=0.0)
    assert report.out_of_bbox == 2
    assert flows.outflow.sum() == 1


def test_empty_file_is_an_error(tmp_path):
    (tmp_path / "t.csv").write_text("")
    with pytest.raises(DataError, match="empty"):
        parse_trips(tmp_path / "t.csv", GRID)
    with pytest.raises(DataError):
        parse_trips(write_trips(tmp_path / "h.csv", []), GRID)


def test_wrong_header_is_an_error(tmp_path):
    (tmp_path / "t.csv").write_text("a,b,c\n1,2,3\n")
    with pytest.raises(DataError, match="header"):
        parse_trips(tmp_path / "t.csv", GRID)


def test_few_malformed_rows_are_skipped_with_line_numbers(tmp_path):
    rows = [trip_row(0, 1, 0, 10) for _ in range(199)]
    rows.insert(50, "oops,1,2,3,4,5")
    rows.insert(120, trip_row(0, 1, 100, 10))  # arrives before it departs
    # 2 bad of 201 rows is still under 1%
    flows, report = parse_trips(write_trips(tmp_path / "t.csv", rows), GRID, origin=0.0)
    assert [line for line, _ in report.malformed] == [52, 122]
    assert report.parsed == 199


def test_over_one_percent_malformed_aborts(tmp_path):
    rows = [trip_row(0, 1, 0, 10) for _ in range(98)] + ["bad"] * 2
    with pytest.raises(DataError, match="malformed"):
        parse_trips(write_trips(tmp_path / "t.csv", rows), GRID, origin=0.0)


# normalization -------------------------------------------------------------------------

def series(inflow, outflow=None) -> FlowSeries:
    inflow = np.asarray(inflow, dtype=float).reshape(-1, 1)
    return FlowSeries(inflow, inflow if outflow is None else np.asarray(outflow, dtype=float).reshape(-1, 1))


def test_endpoints_and_midpoint():
    flows = series([0.0, 10.0, 5.0])
    norm, scale = normalize(flows, range(0, 2))
    np.testing.assert_array_equal(norm.inflow[:, 0], [0.0, 1.0, 0.5])
    assert denormalize(0.5, scale, "in") == 5.0
    assert denormalize(0.0, scale, "out") == 0.0 and denormalize(1.0, scale, "out") == 10.0


def test_values_outside_training_range_may_exceed_one():
    norm, _ = normalize(series([0.0, 10.0, 30.0]), range(0, 2))
    assert norm.inflow[2, 0] == 3.0


def test_constant_channel_maps_to_zero_with_warning():
    with pytest.warns(RuntimeWarning, match="constant"):
        norm, scale = normalize(series([4.0, 4.0], [1.0, 3.0]), range(0, 2))
    np.testing.assert_array_equal(norm.inflow, 0.0)
    assert denormalize(0.0, scale, "in") == 4.0


def test_empty_training_range_is_an_error():
    with pytest.raises(DataError):
        normalize(series([1.0, 2.0]), range(0, 0))


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(1, 4))
def test_denormalize_inverts_normalize(seed, length, n):
    rng = np.random.default_rng(seed)
    scale_ = 10.0 ** rng.uniform(-2, 4)
    flows = FlowSeries(rng.uniform(0, scale_, (length, n)), rng.uniform(0, scale_, (length, n)))
    train = range(0, max(2, length // 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        norm, scale = normalize(flows, train)
    for channel, raw, scaled in (("in", flows.inflow, norm.inflow), ("out", flows.outflow, norm.outflow)):
        lo, hi = scale.channel(channel)
        if hi > lo:
            back = denormalize(scaled, scale, channel)
            assert np.max(np.abs(back - raw)) <= 1e-9 * max(1.0, scale_)
            assert scaled[train.start:train.stop].min() >= 0.0 and scaled[train.start:train.stop].max() <= 1.0


def test_apply_scale_reuses_training_parameters():
    scale = ScaleParams(0.0, 10.0, 0.0, 20.0)
    out = apply_scale(series([5.0], [5.0]), scale)
    assert out.inflow[0, 0] == 0.5 and out.outflow[0, 0] == 0.25


# split ---------------------------------------------------------------------------------

def test_split_forty_twenty_with_validation_tail():
    flows = FlowSeries(np.zeros((60 * 48, 2)), np.zeros((60 * 48, 2)))
    ranges = split(flows, 40, 20, 0.2, 48)
    assert ranges.train == range(0, 32 * 48)
    assert ranges.val == range(32 * 48, 40 * 48)
    assert ranges.test == range(40 * 48, 60 * 48)


def test_split_needs_enough_days():
    flows = FlowSeries(np.zeros((10 * 48, 2)), np.zeros((10 * 48, 2)))
    with pytest.raises(DataError, match="days"):
        split(flows, 8, 3, 0.2, 48)
    with pytest.raises(ValueError):
        split(flows, 8, 2, 1.5, 48)


# files ---------------------------------------------------------------------------------

def test_flow_directory_round_trip(tmp_path, rng):
    flows = FlowSeries(np.round(rng.uniform(0, 50, (6, 4)), 6), np.round(rng.uniform(0, 50, (6, 4)), 6), 3)
    write_flows(tmp_path, flows, flow_metadata(flows, 2, 2, 360, None))
    back, meta = read_flows(tmp_path)
    np.testing.assert_array_equal(back.inflow, flows.inflow)
    np.testing.assert_array_equal(back.outflow, flows.outflow)
    assert back.start_slot_of_day == 3 and meta["slots_per_day"] == 4


def test_read_flows_missing_and_inconsistent(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_flows(tmp_path)
    flows = FlowSeries(np.ones((2, 2)), np.ones((2, 2)))
    meta = flow_metadata(flows, 1, 2, 30, None)
    write_flows(tmp_path, flows, {**meta, "num_slots": 3})
    with pytest.raises(DataError):
        read_flows(tmp_path)
