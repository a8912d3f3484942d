from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farebench.dataset import (
    SCHEMA,
    ColumnTable,
    parse_csv_chunked,
    read_trips,
    split_80_20,
    table_to_records,
    to_column_table,
    TripRecord,
)
from farebench.errors import DataError, DegenerateSplitError, EmptyDatasetError, SchemaError
from farebench.synth import SAMPLE_PATH

from conftest import HEADER, trip_line, write_csv


def collect(path, chunk_rows):
    sizes, records = [], []

    def on_chunk(batch):
        sizes.append(len(batch))
        records.extend(batch)

    summary = parse_csv_chunked(path, chunk_rows, on_chunk)
    return summary, sizes, records


def test_chunk_sizes_for_ten_rows(tmp_path):
    path = write_csv(tmp_path / "t.csv", [trip_line(i) for i in range(10)])
    summary, sizes, _ = collect(path, 4)
    assert sizes == [4, 4, 2]
    assert summary.rows_read == 10
    assert summary.rows_rejected == 0


def test_latitude_out_of_range_rejected(tmp_path):
    path = write_csv(tmp_path / "t.csv", [trip_line(0), trip_line(1, lat="91.0")])
    summary, _, records = collect(path, 100)
    assert summary.rows_rejected == 1
    assert summary.rejects_by_reason["latitude out of range"] == 1
    assert len(records) == 1


def test_bundled_sample_matches_line_count():
    with open(SAMPLE_PATH) as fh:
        n_lines = sum(1 for line in fh if line.strip())
    table, summary = read_trips(SAMPLE_PATH)
    assert summary.rows_read == n_lines - 1
    assert table.n_rows == summary.rows_read - summary.rows_rejected


def test_chunked_and_unchunked_agree():
    a, sa = read_trips(SAMPLE_PATH, chunk_rows=777)
    b, sb = read_trips(SAMPLE_PATH, chunk_rows=100_000)
    assert a.equals(b)
    assert sa.to_json() == sb.to_json()


def test_chunks_never_exceed_chunk_rows(tmp_path):
    path = write_csv(tmp_path / "t.csv", [trip_line(i) for i in range(23)])
    _, sizes, _ = collect(path, 5)
    assert max(sizes) <= 5
    assert sum(sizes) == 23


def test_missing_values_and_zero_coordinates(tmp_path):
    lines = [
        "2015-03-01 10:00:00,NA,40.7,-73.9,40.8,1,5.0\n",
        "2015-03-01 10:00:00,0,0,-73.9,40.8,1,\n",
    ]
    _, _, records = collect(write_csv(tmp_path / "t.csv", lines), 10)
    assert records[0].pickup_longitude is None
    assert records[1].pickup_longitude is None and records[1].pickup_latitude is None
    assert records[1].fare_amount is None


@pytest.mark.parametrize("ts", ["2015/03/01 10:00:00", "2015-03-01T10:00:00", "2015-02-30 10:00:00"])
def test_bad_timestamps_rejected(tmp_path, ts):
    path = write_csv(tmp_path / "t.csv", [f"{ts},-73.9,40.7,-73.9,40.8,1,5.0\n"])
    summary, _, _ = collect(path, 10)
    assert summary.rejects_by_reason["invalid timestamp"] == 1


def test_rejection_is_monotone(tmp_path):
    good = [trip_line(i, fare=5 + i) for i in range(12)]
    s1, _, r1 = collect(write_csv(tmp_path / "a.csv", good), 4)
    s2, _, r2 = collect(write_csv(tmp_path / "b.csv", good[:6] + ["garbage,row\n"] + good[6:]), 4)
    assert s2.rows_rejected == s1.rows_rejected + 1
    assert r1 == r2


def test_header_is_case_insensitive_and_order_free(tmp_path):
    cols = HEADER.strip().split(",")
    header = ",".join(c.upper() for c in reversed(cols)) + "\n"
    row = ",".join(reversed(trip_line(0).strip().split(","))) + "\n"
    table, _ = read_trips(write_csv(tmp_path / "t.csv", [row], header=header))
    assert table.column("fare_amount")[0] == 7.5


def test_header_mismatch_lists_columns(tmp_path):
    path = write_csv(tmp_path / "t.csv", [], header="pickup_datetime,fare,extra\n")
    with pytest.raises(SchemaError) as err:
        parse_csv_chunked(path, 10)
    assert "fare_amount" in err.value.missing
    assert "extra" in err.value.unknown


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_csv_chunked(tmp_path / "nope.csv", 10)


def test_split_sizes_and_determinism():
    s = split_80_20(10, seed=3)
    assert len(s.train_rows) == 8 and len(s.test_rows) == 2
    t = split_80_20(10, seed=3)
    assert np.array_equal(s.train_rows, t.train_rows) and np.array_equal(s.test_rows, t.test_rows)


def test_split_seed_changes_permutation():
    a, b = split_80_20(100, 1), split_80_20(100, 2)
    assert not np.array_equal(a.train_rows, b.train_rows)
    for s in (a, b):
        assert sorted(np.concatenate([s.train_rows, s.test_rows])) == list(range(100))


def test_split_degenerate():
    with pytest.raises(DegenerateSplitError):
        split_80_20(4, 0)


@settings(max_examples=1000, deadline=None)
@given(st.integers(5, 400), st.integers(0, 2**63 - 1))
def test_split_is_partition(n, seed):
    s = split_80_20(n, seed)
    both = np.concatenate([s.train_rows, s.test_rows])
    assert len(both) == n and len(np.unique(both)) == n
    assert abs(len(s.train_rows) - 0.8 * n) <= 1


def make_record(**kw):
    from datetime import datetime, timezone

    base = dict(
        pickup_datetime=datetime(2015, 3, 1, 10, tzinfo=timezone.utc),
        pickup_longitude=-73.98, pickup_latitude=40.75,
        dropoff_longitude=-73.95, dropoff_latitude=40.77,
        passenger_count=2, fare_amount=9.25,
    )
    base.update(kw)
    return TripRecord(**base)


def test_to_column_table_masks_and_roundtrip():
    recs = [make_record(), make_record(pickup_longitude=None), make_record(fare_amount=12.125)]
    table = to_column_table(recs)
    assert table.column_names == SCHEMA
    assert table.mask("pickup_longitude").sum() == 1
    assert {len(table.column(c)) for c in SCHEMA} == {3}
    assert table_to_records(table) == recs


def test_to_column_table_empty():
    with pytest.raises(EmptyDatasetError):
        to_column_table([])


def test_record_invariants():
    with pytest.raises(DataError):
        make_record(pickup_latitude=95.0)
    with pytest.raises(DataError):
        make_record(fare_amount=float("inf"))


def test_unequal_columns_rejected():
    with pytest.raises(DataError):
        ColumnTable(("a", "b"), {"a": np.zeros(2), "b": np.zeros(3)}, {"a": np.zeros(2, bool), "b": np.zeros(3, bool)})
