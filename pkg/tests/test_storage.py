import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eosprobe.storage import (SNAPSHOT_MAGIC, SnapshotChecksumError, SnapshotError,
                              SnapshotVersionError, TelemetryFormatError, TelemetryRecord,
                              TelemetryWriter, decode_snapshot, encode_snapshot, read_snapshot,
                              read_telemetry, sidecar_path, write_snapshot, write_telemetry)

from conftest import random_record, random_vector


def same_bits(a, b):
    return json_bits(dataclasses.asdict(a)) == json_bits(dataclasses.asdict(b))


def json_bits(obj):
    # floats compared by bit pattern so -0.0 and 0.0 differ
    if isinstance(obj, float):
        return ("f", np.float64(obj).tobytes())
    if isinstance(obj, dict):
        return {k: json_bits(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [json_bits(v) for v in obj]
    return obj


# -- telemetry --------------------------------------------------------------------

def test_telemetry_round_trip_random_records(tmp_path):
    rng = np.random.default_rng(0)
    recs = [random_record(rng) for _ in range(1000)]
    path = tmp_path / "t.jsonl"
    write_telemetry(recs, path)
    back = read_telemetry(path)
    assert len(back) == len(recs)
    assert all(same_bits(a, b) for a, b in zip(recs, back))


finite = st.floats(allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(loss=finite, t=finite, lams=st.lists(finite, max_size=5), it=st.integers(0, 2 ** 62))
def test_telemetry_round_trip_property(tmp_path_factory, loss, t, lams, it):
    rec = TelemetryRecord(iteration=it, t=t, eta=0.01, loss=loss, eigenvalues=lams,
                          rho=[None if x == 0 else x for x in lams])
    path = tmp_path_factory.mktemp("p") / "t.jsonl"
    write_telemetry([rec], path)
    (back,) = read_telemetry(path)
    assert same_bits(rec, back)


def test_empty_run_has_header_only(tmp_path):
    path = tmp_path / "e.jsonl"
    write_telemetry([], path)
    text = path.read_text()
    assert text.count("\n") == 1 and '"format": "eosprobe.telemetry"' in text
    assert read_telemetry(path) == []


def test_writer_flushes_each_record(tmp_path):
    path = tmp_path / "w.jsonl"
    with TelemetryWriter(path) as sink:
        sink(TelemetryRecord(0, 0.0, 0.1, 1.0))
        assert len(read_telemetry(path)) == 1


def test_truncated_line_names_line_number(tmp_path):
    path = tmp_path / "t.jsonl"
    write_telemetry([TelemetryRecord(i, 0.0, 0.1, 1.0) for i in range(3)], path)
    path.write_text(path.read_text()[:-7])
    with pytest.raises(TelemetryFormatError, match="line 4"):
        read_telemetry(path)


def test_bad_header_and_fields(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text('{"format": "other"}\n')
    with pytest.raises(TelemetryFormatError, match="line 1"):
        read_telemetry(path)
    write_telemetry([TelemetryRecord(0, 0.0, 0.1, 1.0)], path)
    path.write_text(path.read_text() + '{"iteration": 1}\n')
    with pytest.raises(TelemetryFormatError, match="line 3"):
        read_telemetry(path)
    path.write_text("")
    with pytest.raises(TelemetryFormatError):
        read_telemetry(path)


def test_rho_at_is_one_based():
    rec = TelemetryRecord(0, 0.0, 0.1, 1.0, rho=[0.9, None])
    assert rec.rho_at(1) == 0.9 and rec.rho_at(2) is None and rec.rho_at(3) is None


# -- snapshots --------------------------------------------------------------------

def test_snapshot_round_trip_random_vectors():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        v = random_vector(rng)
        assert decode_snapshot(encode_snapshot(v)).tobytes() == v.tobytes()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(allow_nan=True, allow_infinity=True), max_size=40))
def test_snapshot_round_trip_property(values):
    v = np.array(values, dtype=np.float64)
    assert decode_snapshot(encode_snapshot(v)).tobytes() == v.tobytes()


def test_snapshot_layout():
    blob = encode_snapshot(np.array([1.0, -2.0]))
    assert blob[:8] == SNAPSHOT_MAGIC
    assert len(blob) == 20 + 16 + 32
    assert np.frombuffer(blob[20:36], "<f8").tolist() == [1.0, -2.0]


def test_every_single_bit_flip_detected():
    blob = bytearray(encode_snapshot(np.random.default_rng(2).standard_normal(5)))
    for byte in range(len(blob)):
        for bit in range(8):
            bad = bytearray(blob)
            bad[byte] ^= 1 << bit
            with pytest.raises(SnapshotError):
                decode_snapshot(bytes(bad))


def test_payload_flip_is_checksum_error():
    blob = bytearray(encode_snapshot(np.ones(3)))
    blob[25] ^= 0x10
    with pytest.raises(SnapshotChecksumError):
        decode_snapshot(bytes(blob))


def test_unknown_version_rejected():
    blob = bytearray(encode_snapshot(np.ones(3)))
    blob[8] = 2
    with pytest.raises(SnapshotVersionError):
        decode_snapshot(bytes(blob))


def test_truncated_snapshot_rejected():
    blob = encode_snapshot(np.ones(3))
    for cut in (0, 10, len(blob) - 1):
        with pytest.raises(SnapshotError):
            decode_snapshot(blob[:cut])


def test_snapshot_file_with_sidecar(tmp_path):
    path = tmp_path / "snap_00000100.bin"
    theta = np.linspace(-1, 1, 7)
    write_snapshot(theta, {"iteration": 100}, path)
    back, meta = read_snapshot(path)
    assert back.tobytes() == theta.tobytes()
    assert meta["iteration"] == 100 and meta["n_params"] == 7
    assert sidecar_path(path).name == "snap_00000100.json"
    assert not list(tmp_path.glob("*.tmp"))


def test_snapshot_rejects_matrix():
    with pytest.raises(SnapshotError):
        encode_snapshot(np.ones((2, 2)))
