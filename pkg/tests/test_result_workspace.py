import os

from io_ops.record_io import ResultRecord, load_record
from services.result_workspace import ResultWorkspace


def test_save_never_overwrites(tmp_path):
    workspace = ResultWorkspace(str(tmp_path / "results"))
    record = ResultRecord("validate", "identity", 1, {}).finalize(0.0)
    first, first_csv = workspace.save(record)
    second, _ = workspace.save(record)
    assert os.path.basename(first) == "validate_identity.json"
    assert os.path.basename(first_csv) == "validate_identity.csv"
    assert os.path.basename(second) == "validate_identity_1.json"
    assert workspace.list_records() == [first, second]
    assert load_record(second).kind == "validate"


def test_custom_stem(tmp_path):
    workspace = ResultWorkspace(str(tmp_path))
    record = ResultRecord("martingale", "identity", 1, {})
    path, _ = workspace.save(record, stem="martingale_identity_replay")
    assert path.endswith("martingale_identity_replay.json")
    assert workspace.reserve_stem("martingale_identity_replay") == "martingale_identity_replay_1"
