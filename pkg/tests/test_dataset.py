import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dayshift import synthgen
from dayshift.dataset import (DataError, Feature, FeatureSchema, TransactionTable, load_csv,
                              load_schema, parse_schema, slice_by_day, write_csv, write_schema)

from conftest import small_calendar

SCHEMA_TEXT = """# test schema
x,continuous
c,categorical,5
b,binary   # trailing comment
"""


def write_files(tmp_path, rows, schema_text=SCHEMA_TEXT):
    (tmp_path / "d.schema").write_text(schema_text)
    (tmp_path / "d.csv").write_text("date,label,x,c,b\n" + "".join(r + "\n" for r in rows))
    return tmp_path / "d.csv", tmp_path / "d.schema"


def test_parse_schema():
    s = parse_schema(SCHEMA_TEXT.splitlines())
    assert s.names == ["x", "c", "b"]
    assert [f.n_categories for f in s.features] == [0, 5, 2]


@pytest.mark.parametrize("text", ["x,continuous\nx,binary", "c,categorical,1", "x,continuous,3",
                                  "x,weird", ",continuous", "# nothing"])
def test_bad_schema(text):
    with pytest.raises(DataError):
        parse_schema(text.splitlines())


def test_load_minimal_csv(tmp_path):
    p, s = write_files(tmp_path, ["2015-03-01,0,1.5,0,1", "2015-03-02,1,-2,4,0",
                                  "2015-03-03,0,0.25,2,1"])
    t = load_csv(p, s)
    assert t.n_days == 3
    assert list(t.day_index) == [0, 1, 2]
    assert t.day_dates[0] == dt.date(2015, 3, 1)


def test_days_numbered_by_date_not_file_order(tmp_path):
    p, s = write_files(tmp_path, ["2015-03-02,0,1,0,1", "2015-03-01,0,2,1,0"])
    t = load_csv(p, s)
    assert list(t.day_index) == [1, 0]


def test_categorical_out_of_range_names_row_and_feature(tmp_path):
    p, s = write_files(tmp_path, ["2015-03-01,0,1,0,1", "2015-03-01,0,1,7,1"])
    with pytest.raises(DataError, match=r"row 2.*'c'"):
        load_csv(p, s)


def test_date_gap_rejected(tmp_path):
    p, s = write_files(tmp_path, ["2015-03-01,0,1,0,1", "2015-03-03,0,1,0,1"])
    with pytest.raises(DataError, match="non-consecutive dates"):
        load_csv(p, s)


@pytest.mark.parametrize("row", ["2015-03-01,0,nan,0,1", "2015-03-01,0,inf,0,1",
                                 "2015-03-01,2,1,0,1", "2015-03-01,0,1,0", "2015-13-01,0,1,0,1",
                                 "2015-03-01,0,1,0,2", "2015-03-01,0,1,1.5,1"])
def test_malformed_rows_fail(tmp_path, row):
    p, s = write_files(tmp_path, ["2015-03-01,0,1,0,1", row])
    with pytest.raises(DataError):
        load_csv(p, s)


def test_header_mismatch_and_missing_files(tmp_path):
    (tmp_path / "d.schema").write_text(SCHEMA_TEXT)
    (tmp_path / "d.csv").write_text("date,label,x,b,c\n2015-03-01,0,1,0,1\n")
    with pytest.raises(DataError, match="header"):
        load_csv(tmp_path / "d.csv", tmp_path / "d.schema")
    with pytest.raises(DataError, match="not found"):
        load_csv(tmp_path / "nope.csv", tmp_path / "d.schema")
    with pytest.raises(DataError, match="not found"):
        load_schema(tmp_path / "nope.schema")


def test_slice_by_day(tiny_table):
    slices = slice_by_day(tiny_table)
    assert [s.day_index for s in slices] == [0, 1]
    assert [list(s.row_ids) for s in slices] == [[0, 1], [2]]


def test_table_rejects_empty_day(tiny_schema):
    with pytest.raises(DataError):
        TransactionTable(tiny_schema, np.array([0, 2]), np.zeros((2, 3)), np.array([0, 0]),
                         tuple(dt.date(2015, 3, d) for d in (1, 2, 3)))


def test_table_is_read_only(tiny_table):
    with pytest.raises(ValueError):
        tiny_table.values[0, 0] = 3.0


def test_92_day_table_gives_92_slices():
    t = synthgen.generate(synthgen.belgian_calendar_2015(), synthgen.GenParams(tx_per_day=20))
    slices = slice_by_day(t)
    assert len(slices) == 92
    for s in slices:
        assert np.all(t.day_index[s.row_ids] == s.day_index)


@settings(max_examples=25, deadline=None)
@given(n_days=st.integers(1, 12), tx=st.integers(1, 30), seed=st.integers(0, 2**32),
       delta=st.floats(0, 2))
def test_round_trip_and_partition(tmp_path_factory, n_days, tx, seed, delta):
    t = synthgen.generate(small_calendar(n_days), synthgen.GenParams(delta, tx, seed=seed))
    assert sum(len(s.row_ids) for s in slice_by_day(t)) == t.n_rows
    d = tmp_path_factory.mktemp("rt")
    write_csv(t, d / "t.csv", header=["comment"])
    write_schema(t.schema, d / "t.schema")
    back = load_csv(d / "t.csv", d / "t.schema")
    assert back.equals(t)
    assert back.fingerprint() == t.fingerprint()


def test_schema_append_collision(tiny_schema):
    s = tiny_schema.append(Feature("day_cluster", "categorical", 4))
    assert s.names[-1] == "day_cluster"
    with pytest.raises(DataError, match="collision"):
        s.append(Feature("day_cluster", "categorical", 4))
    assert isinstance(s, FeatureSchema)
