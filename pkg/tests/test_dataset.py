import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfx.dataset import (DEFAULT_SCHEMA, WEEKDAY_TYPE, CONFOUNDER, OUTCOME, TREATMENT,
                         CalibrationSpec, calibrate_continuous, calibrate_ordinal,
                         calibrate_record, fit_calibration, load_dataset, split_dataset,
                         split_indices, write_dataset)
from cfx.errors import ContractError, DataError

from conftest import MID_CONFOUNDERS, make_dataset

HEADER = ",".join(v.name for v in DEFAULT_SCHEMA)


def write_rows(path, rows, header=HEADER):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def row(y=0, t=(3, 0, 2, 0, 0, 0, 0, 0), x=MID_CONFOUNDERS):
    return ",".join(str(v) for v in (y, *t, *x))


def test_default_schema_shape():
    roles = [v.role for v in DEFAULT_SCHEMA]
    assert len(DEFAULT_SCHEMA) == 18
    assert roles.count(OUTCOME) == 1 and roles.count(TREATMENT) == 8 and roles.count(CONFOUNDER) == 9
    out = DEFAULT_SCHEMA[0]
    assert out.levels == 4
    assert [v.levels for v in DEFAULT_SCHEMA if v.role == TREATMENT] == [4, 3, 3, 2, 2, 2, 2, 2]
    assert WEEKDAY_TYPE not in DEFAULT_SCHEMA


def test_load_three_rows(tmp_path):
    p = write_rows(tmp_path / "d.csv", [row(0), row(1), row(3)])
    ds = load_dataset(p)
    assert ds.n == 3
    assert list(ds.record_ids) == [0, 1, 2]
    assert list(ds.outcome) == [0, 1, 3]


def test_missing_column_named(tmp_path):
    header = ",".join(v.name for v in DEFAULT_SCHEMA[:-1])
    p = write_rows(tmp_path / "d.csv", [row()[: row().rfind(",")]], header)
    with pytest.raises(DataError, match="Intersection density"):
        load_dataset(p)


def test_lighting_code_out_of_range(tmp_path):
    p = write_rows(tmp_path / "d.csv", [row(t=(4, 0, 2, 0, 0, 0, 0, 0))])
    with pytest.raises(DataError, match="Lighting condition.*0-3"):
        load_dataset(p)


def test_error_reports_line(tmp_path):
    p = write_rows(tmp_path / "d.csv", [row(), row(y="x")])
    with pytest.raises(DataError, match="line 3"):
        load_dataset(p)


def test_percentage_above_100_rejected(tmp_path):
    x = list(MID_CONFOUNDERS)
    x[2] = 140.0
    p = write_rows(tmp_path / "d.csv", [row(x=x)])
    with pytest.raises(DataError, match="Minority percentage"):
        load_dataset(p)


def test_comment_lines_and_extra_columns(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("# meta\n# more\nrecord_id,extra," + HEADER + "\n7,zzz," + row(2) + "\n")
    ds = load_dataset(p)
    assert list(ds.record_ids) == [7] and list(ds.outcome) == [2]


def test_calibrate_continuous_examples():
    assert calibrate_continuous(5, 0, 10) == 0.5
    assert calibrate_continuous(0.02, 0.02, 59709.71) == 0.0
    assert calibrate_continuous(2573.91, 0.02, 59709.71) == pytest.approx(0.043107, abs=5e-7)


def test_calibrate_continuous_clamps():
    assert calibrate_continuous(-3, 0, 10) == 0.0
    assert calibrate_continuous(30, 0, 10) == 1.0
    with pytest.raises(ContractError):
        calibrate_continuous(1, 2, 2)


def test_calibrate_ordinal_examples():
    assert calibrate_ordinal(0, 4) == 0.0
    assert calibrate_ordinal(3, 4) == 1.0
    assert calibrate_ordinal(2, 4) == pytest.approx(2 / 3, abs=1e-12)
    assert calibrate_ordinal(1, 2) == 1.0
    with pytest.raises(ContractError):
        calibrate_ordinal(4, 4)


@given(st.floats(-100, 100), st.floats(1e-3, 1e6), st.floats(0, 1), st.floats(0, 1))
def test_calibrate_continuous_affine(offset, width, fa, fb):
    # |min| bounded by a multiple of the range keeps cancellation below the tolerance
    lo = offset * width
    hi = lo + width
    a, b = lo + fa * width, lo + fb * width
    lhs = calibrate_continuous(a, lo, hi) + calibrate_continuous(b, lo, hi)
    rhs = 2 * calibrate_continuous((a + b) / 2, lo, hi)
    assert abs(lhs - rhs) <= 1e-12
    assert 0.0 <= calibrate_continuous(a, lo, hi) <= 1.0


@given(st.integers(2, 12))
def test_calibrate_ordinal_increasing(K):
    vals = [calibrate_ordinal(c, K) for c in range(K)]
    assert vals[0] == 0.0 and vals[-1] == 1.0
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_calibrate_record_examples(synth_small):
    ds, _ = synth_small
    mins = ds.confounders.min(axis=0)
    rec = ds.record(0)
    rec_min = type(rec)(rec.record_id, rec.outcome, rec.treatments, tuple(mins))
    x, _ = calibrate_record(rec_min, ds)
    assert np.all(x == 0.0)
    t = list(rec.treatments)
    t[2] = 2  # good weather
    _, t_hat = calibrate_record(type(rec)(0, 0, tuple(t), rec.confounders), ds)
    assert t_hat[2] == 1.0
    a = calibrate_record(ds.record(3), ds)
    b = calibrate_record(ds.record(3), ds)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_calibration_values_in_unit_interval(synth_small):
    ds, _ = synth_small
    for arr in (ds.calibrate_confounders(), ds.calibrate_treatments()):
        assert arr.min() >= 0.0 and arr.max() <= 1.0


def test_calibration_spec_roundtrip():
    for spec in (CalibrationSpec("continuous", min=0.5, max=9.0), CalibrationSpec("ordinal", K=3)):
        assert CalibrationSpec.from_dict(spec.to_dict()) == spec


def test_degenerate_range_widens_to_schema_bounds():
    ds = make_dataset([(0, (0,) * 8, MID_CONFOUNDERS)])
    spec = ds.calibration["Population density"]
    assert (spec.min, spec.max) == (0.02, 59709.71)


def test_split_sizes_and_determinism():
    a = split_indices(10, (0.8, 0.1, 0.1), 7)
    b = split_indices(10, (0.8, 0.1, 0.1), 7)
    assert tuple(len(p) for p in a) == (8, 1, 1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_split_empty_part_error():
    with pytest.raises(ContractError, match="empty"):
        split_indices(2, (0.8, 0.1, 0.1), 0)


@given(st.integers(10, 300), st.integers(0, 2**31))
def test_split_is_partition(n, seed):
    parts = split_indices(n, (0.8, 0.1, 0.1), seed)
    allidx = np.concatenate(parts)
    assert len(allidx) == n and set(allidx.tolist()) == set(range(n))


def test_split_dataset_calibration_from_train(synth_small):
    ds, _ = synth_small
    tr, va, te = split_dataset(ds, (0.8, 0.1, 0.1), 3)
    assert tr.calibration == va.calibration == te.calibration
    refit = fit_calibration(ds.schema, tr.treatments, tr.confounders)
    assert refit == tr.calibration
    ids = np.concatenate([tr.record_ids, va.record_ids, te.record_ids])
    assert sorted(ids.tolist()) == sorted(ds.record_ids.tolist())


def test_csv_roundtrip(tmp_path, synth_small):
    ds, _ = synth_small
    write_dataset(ds, tmp_path / "d.csv", ["a comment"])
    back = load_dataset(tmp_path / "d.csv")
    assert back.records == ds.records
    assert back.calibration == ds.calibration


def test_dataset_immutable(synth_small):
    ds, _ = synth_small
    with pytest.raises(ValueError):
        ds.outcome[0] = 3


def test_duplicate_record_ids_rejected():
    with pytest.raises(DataError):
        make_dataset([(0, (0,) * 8, MID_CONFOUNDERS)] * 2, record_ids=[1, 1])


def test_optional_weekday_confounder(tmp_path):
    schema = DEFAULT_SCHEMA + (WEEKDAY_TYPE,)
    header = ",".join(v.name for v in schema)
    p = write_rows(tmp_path / "d.csv", [row() + ",6", row(1) + ",0"], header)
    ds = load_dataset(p, schema)
    assert ds.confounders[:, -1].tolist() == [6.0, 0.0]
    assert ds.calibrate_confounders()[:, -1].tolist() == [1.0, 0.0]
