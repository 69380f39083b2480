import json
import logging

import numpy as np
import pandas as pd
import pytest

import crud
from database import get_db
from logging_config import JsonLineFormatter
from services.artifacts import (
    PROVENANCE_SUFFIX,
    Provenance,
    read_json,
    read_provenance,
    sha256_file,
    write_csv,
    write_json,
)
from services.errors import DataError

PROVENANCE = Provenance(config_hash="abc123", seed=7, git_revision="unknown", stage="aggregate")


def test_csv_format_and_sidecar(tmp_path):
    frame = pd.DataFrame({
        "municipality_id": ["m1", "m2"],
        "date": pd.to_datetime(["2019-07-01", "2019-07-02"]),
        "tmax": [31.123456789, 29.0],
        "heatwave": [True, False],
    })
    path = tmp_path / "surfaces" / "reanalysis.csv"
    digest = write_csv(frame, path, PROVENANCE)

    assert digest == sha256_file(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    assert lines[0] == "municipality_id,date,tmax,heatwave"
    assert lines[1] == "m1,2019-07-01,31.123457,1"
    assert lines[2] == "m2,2019-07-02,29.000000,0"
    assert not (tmp_path / "surfaces" / "reanalysis.csv.tmp").exists()

    sidecar = path.with_name(path.name + PROVENANCE_SUFFIX)
    assert read_json(sidecar)["file"] == "reanalysis.csv"
    assert read_provenance(path) == PROVENANCE.as_dict()


def test_rewrite_is_byte_identical(tmp_path):
    frame = pd.DataFrame({"x": np.linspace(0, 1, 5)})
    first = write_csv(frame, tmp_path / "a.csv", PROVENANCE)
    second = write_csv(frame, tmp_path / "a.csv", PROVENANCE)
    assert first == second


def test_json_embeds_provenance_and_converts_numpy(tmp_path):
    payload = {"mmt": np.float64(24.5), "n": np.int64(3), "flag": np.bool_(True), "day": pd.Timestamp("2019-07-01")}
    path = tmp_path / "report.json"
    write_json(payload, path, PROVENANCE)
    body = read_json(path)
    assert body["mmt"] == 24.5 and body["n"] == 3 and body["flag"] is True
    assert body["day"] == "2019-07-01"
    assert read_provenance(path)["stage"] == "aggregate"
    assert list(json.loads(path.read_text())) == sorted(body)


def test_read_json_errors(tmp_path):
    with pytest.raises(DataError):
        read_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(DataError, match="Malformed"):
        read_json(bad)
    assert read_provenance(tmp_path / "plain.csv") is None


def test_registry_create_or_update(tmp_path):
    with get_db(tmp_path) as db:
        row = {
            "kind": "surface",
            "key": "reanalysis",
            "path": "surfaces/reanalysis.csv",
            "sha256": "0" * 64,
            "config_hash": "abc123",
            "seed": 7,
            "git_revision": "unknown",
        }
        crud.create_or_update_artifact(db, row)
        crud.create_or_update_artifact(db, {**row, "sha256": "1" * 64})
        artifacts = crud.get_artifacts(db, "surface")
        assert len(artifacts) == 1
        assert artifacts[0].sha256 == "1" * 64

        crud.create_or_update_stage_run(db, "aggregate", "failed", error_message="boom")
        crud.create_or_update_stage_run(db, "aggregate", "success", records_written=1, seed=7)
        assert crud.get_stage_run(db, "aggregate").error_message is None
        assert crud.get_last_success_time(db, "aggregate") is not None
        assert crud.get_last_success_time(db, "prep") is None
    assert (tmp_path / "registry.db").exists()


def test_json_log_lines():
    record = logging.LogRecord("services.epi", logging.WARNING, __file__, 1, "tau %s", (3,), None)
    record.stage = "fit-epi"
    line = json.loads(JsonLineFormatter().format(record))
    assert line["level"] == "WARNING"
    assert line["message"] == "tau 3"
    assert line["stage"] == "fit-epi"
