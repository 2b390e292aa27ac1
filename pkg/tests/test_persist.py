import csv
import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from umigrat import persist
from umigrat.persist import ArtifactError


def _fnv_reference(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@pytest.mark.parametrize("data,expected", [(b"", 0xCBF29CE484222325), (b"a", 0xAF63DC4C8601EC8C),
                                           (b"foobar", 0x85944171F73967E8)])
def test_published_fnv_vectors(data, expected):
    assert persist.fnv1a64(data) == expected


@given(st.binary(max_size=512))
def test_fnv_matches_reference_loop(data):
    assert persist.fnv1a64(data) == _fnv_reference(data)


def test_fixed_payload_fingerprint(tmp_path):
    path = tmp_path / "a.umgr"
    fp = persist.write_artifact(path, "test", {"k": 1}, {"w": np.arange(6.0).reshape(2, 3)}, seed=4)
    payload = persist.encode_payload({"k": 1}, {"w": np.arange(6.0).reshape(2, 3)})
    assert fp == f"{_fnv_reference(payload):016x}"
    head, meta, t = persist.read_artifact(path, kind="test")
    assert head["seed"] == 4 and head["fingerprint"] == fp and meta == {"k": 1}
    np.testing.assert_array_equal(t["w"], np.arange(6.0).reshape(2, 3))


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "a.umgr"
    persist.write_artifact(path, "test", {}, {"w": np.ones(50)})
    buf = path.read_bytes()
    for cut in (3, 20, len(buf) - 1):
        path.write_bytes(buf[:cut])
        with pytest.raises(ArtifactError):
            persist.read_artifact(path)
    assert persist.artifact_fingerprint(path) is None


def test_corrupted_payload_rejected(tmp_path):
    path = tmp_path / "a.umgr"
    persist.write_artifact(path, "test", {}, {"w": np.ones(8)})
    buf = bytearray(path.read_bytes())
    buf[-1] ^= 0x01
    path.write_bytes(bytes(buf))
    with pytest.raises(ArtifactError, match="fingerprint"):
        persist.read_artifact(path)


def test_bad_magic_version_and_kind_rejected(tmp_path):
    path = tmp_path / "a.umgr"
    persist.write_artifact(path, "model", {}, {})
    good = path.read_bytes()
    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(ArtifactError, match="magic"):
        persist.read_artifact(path)
    path.write_bytes(good[:4] + (99).to_bytes(4, "little") + good[8:])
    with pytest.raises(ArtifactError, match="version"):
        persist.read_artifact(path)
    path.write_bytes(good)
    with pytest.raises(ArtifactError, match="expected"):
        persist.read_artifact(path, kind="umi")


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40))
def test_round_trip_is_stable(values):
    import tempfile
    from pathlib import Path
    with tempfile.TemporaryDirectory() as d:
        a = np.array(values)
        persist.write_artifact(Path(d) / "1", "t", {}, {"a": a})
        once = persist.read_artifact(Path(d) / "1")[2]["a"]
        persist.write_artifact(Path(d) / "2", "t", {}, {"a": once})
        twice = persist.read_artifact(Path(d) / "2")[2]["a"]
        assert np.array_equal(once, twice)
        assert np.array_equal(once, a.astype(np.float32).astype(np.float64))


def test_write_is_atomic_and_leaves_no_temp_files(tmp_path):
    path = tmp_path / "sub" / "a.umgr"
    persist.write_artifact(path, "t", {}, {"a": np.zeros(3)})
    persist.write_artifact(path, "t", {}, {"a": np.ones(3)})
    assert [p.name for p in path.parent.iterdir()] == ["a.umgr"]
    np.testing.assert_array_equal(persist.read_artifact(path)[2]["a"], np.ones(3))


def test_csv_quoting_and_header(tmp_path):
    path = tmp_path / "r.csv"
    persist.write_csv(path, ["name", "value"], [['a,"b"', 1.5], ["plain", ""]])
    raw = path.read_bytes().decode("utf-8")
    assert raw.startswith("name,value\r\n")
    rows = list(csv.reader(io.StringIO(raw)))
    assert rows[1] == ['a,"b"', "1.5"] and rows[2] == ["plain", ""]


def test_array_fingerprint_sensitive_to_shape():
    a = np.arange(6.0)
    assert persist.fingerprint_arrays(a) != persist.fingerprint_arrays(a.reshape(2, 3))
    assert persist.fingerprint_arrays(a) == persist.fingerprint_arrays(a.copy())
