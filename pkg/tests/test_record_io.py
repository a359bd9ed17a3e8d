import csv
import json

import pytest

from io_ops.record_io import (
    RECORD_FIELDS, ResultRecord, load_record, record_to_json, table_rows, write_csv, write_json,
)
from utils.errors import ValidationError
from utils.estimates import EstimateWithError


def _record() -> ResultRecord:
    record = ResultRecord("martingale", "identity", 7, {"config": {"seed": 7}})
    record.add_estimate("mean_weight/p0", EstimateWithError(1.0000000000000002, 0.1 + 0.2, 10))
    record.add_flag("normalized/p0", True)
    return record


def test_fields_in_fixed_order():
    data = json.loads(record_to_json(_record()))
    assert tuple(data) == RECORD_FIELDS


def test_duplicate_estimate_rejected():
    record = _record()
    with pytest.raises(ValidationError):
        record.add_estimate("mean_weight/p0", EstimateWithError(1.0, 0.0, 1))


def test_finalize_sets_verdict():
    record = _record()
    assert record.finalize(1.5).passed
    record.add_flag("cap/p0", False)
    assert not record.finalize(2.0).passed
    assert record.duration_seconds == 2.0


def test_json_preserves_floats(tmp_path):
    record = _record().finalize(0.25)
    path = write_json(record, str(tmp_path / "r.json"))
    loaded = load_record(path)
    assert loaded.estimates["mean_weight/p0"]["mean"] == 1.0000000000000002
    assert loaded.estimates["mean_weight/p0"]["standard_error"] == 0.1 + 0.2
    assert loaded.stochastic_outputs() == record.stochastic_outputs()


def test_load_record_errors(tmp_path):
    with pytest.raises(ValidationError):
        load_record(str(tmp_path / "none.json"))
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps({"kind": "martingale"}), encoding="utf-8")
    with pytest.raises(ValidationError):
        load_record(str(partial))


def test_csv_falls_back_to_estimates(tmp_path):
    record = _record()
    assert table_rows(record) == [{"name": "mean_weight/p0", "mean": 1.0000000000000002,
                                   "standard_error": 0.1 + 0.2, "n": 10}]
    path = write_csv(record, str(tmp_path / "r.csv"))
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["name", "mean", "standard_error", "n"]
    assert float(rows[1][1]) == 1.0000000000000002


def test_csv_header_unions_table_keys(tmp_path):
    record = _record()
    record.table = [{"policy": "p0", "mean": 1.0}, {"policy": "centralized", "mean": 0.5, "role": "bound"}]
    path = write_csv(record, str(tmp_path / "t.csv"))
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["policy", "mean", "role"]
    assert rows[0]["role"] == ""
    assert rows[1]["role"] == "bound"
