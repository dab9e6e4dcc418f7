import numpy as np
import pytest

from uattr.container import (
    CHECKPOINT_MAGIC,
    ContainerError,
    canonical_json,
    decode_container,
    encode_container,
    file_sha256,
    read_container,
    write_container,
)


def test_roundtrip(tmp_path):
    data = np.linspace(-1, 1, 17, dtype=np.float32)
    sha = write_container(tmp_path / "a.bin", CHECKPOINT_MAGIC, {"b": 1, "a": [1, 2]}, data)
    header, payload = read_container(tmp_path / "a.bin", CHECKPOINT_MAGIC)
    assert np.array_equal(payload, data)
    assert header["a"] == [1, 2] and header["payload_count"] == 17
    assert sha == file_sha256(tmp_path / "a.bin")


def test_layout_bytes():
    blob = encode_container(b"UATTRCKP", {"k": 1}, np.array([1.0], dtype=np.float32))
    hlen = int.from_bytes(blob[8:16], "little")
    assert blob[:8] == b"UATTRCKP"
    assert blob[16 : 16 + hlen] == b'{"k":1,"payload_count":1}'
    assert blob[16 + hlen :] == np.array([1.0], dtype="<f4").tobytes()


def test_bad_magic_and_truncation():
    blob = encode_container(CHECKPOINT_MAGIC, {}, np.zeros(4, dtype=np.float32))
    with pytest.raises(ContainerError):
        decode_container(blob, b"UATTRFSH")
    with pytest.raises(ContainerError):
        decode_container(blob[:-2], CHECKPOINT_MAGIC)
    with pytest.raises(ContainerError):
        decode_container(blob[:12], CHECKPOINT_MAGIC)


def test_canonical_json_is_key_order_free():
    assert canonical_json({"b": 1, "a": 2}) == canonical_json({"a": 2, "b": 1})
