import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avse.serialize import ArchiveError, canonical_json, fingerprint, read_archive, write_archive


class TestArchive:
    def test_round_trip_dtypes(self, tmp_path):
        tensors = {
            "a": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.array([1.5, -2.0]),
            "c": np.arange(4, dtype=np.uint8),
            "d": np.array([[-7]], dtype=np.int64),
            "scalar": np.float64(3.0),
        }
        write_archive(tmp_path / "x", b"TEST", tensors, {"k": [1, 2]}, b"\x01" * 32)
        fp, meta, back = read_archive(tmp_path / "x", b"TEST")
        assert fp == b"\x01" * 32 and meta == {"k": [1, 2]}
        assert list(back) == list(tensors)
        for k, v in tensors.items():
            assert back[k].dtype == np.asarray(v).dtype
            np.testing.assert_array_equal(back[k], v)

    def test_header_layout(self, tmp_path):
        write_archive(tmp_path / "x", b"TEST", {}, {})
        raw = (tmp_path / "x").read_bytes()
        assert raw[:4] == b"TEST"
        assert struct.unpack("<I", raw[4:8]) == (1,)
        assert raw[8:40] == bytes(32)
        assert struct.unpack("<I", raw[40:44]) == (2,) and raw[44:46] == b"{}"
        assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])

    def test_bad_magic(self, tmp_path):
        write_archive(tmp_path / "x", b"TEST", {})
        with pytest.raises(ArchiveError, match="magic"):
            read_archive(tmp_path / "x", b"NOPE")

    def test_bit_flip(self, tmp_path):
        write_archive(tmp_path / "x", b"TEST", {"a": np.ones(10)})
        raw = bytearray((tmp_path / "x").read_bytes())
        raw[60] ^= 1
        (tmp_path / "x").write_bytes(bytes(raw))
        with pytest.raises(ArchiveError, match="checksum"):
            read_archive(tmp_path / "x", b"TEST")

    def test_truncated(self, tmp_path):
        write_archive(tmp_path / "x", b"TEST", {"a": np.ones(10)})
        (tmp_path / "x").write_bytes((tmp_path / "x").read_bytes()[:20])
        with pytest.raises(ArchiveError):
            read_archive(tmp_path / "x", b"TEST")

    def test_future_version(self, tmp_path):
        write_archive(tmp_path / "x", b"TEST", {})
        raw = bytearray((tmp_path / "x").read_bytes()[:-4])
        raw[4:8] = struct.pack("<I", 2)
        (tmp_path / "x").write_bytes(bytes(raw) + struct.pack("<I", zlib.crc32(bytes(raw))))
        with pytest.raises(ArchiveError, match="version"):
            read_archive(tmp_path / "x", b"TEST")

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(ValueError):
            write_archive(tmp_path / "x", b"TEST", {"c": np.ones(2, np.complex128)})

    @settings(max_examples=25, deadline=None)
    @given(shape=st.lists(st.integers(0, 4), min_size=0, max_size=4), seed=st.integers(0, 2**31))
    def test_round_trip_property(self, tmp_path_factory, shape, seed):
        path = tmp_path_factory.mktemp("h") / "x"
        arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
        write_archive(path, b"PROP", {"t": arr})
        np.testing.assert_array_equal(read_archive(path, b"PROP")[2]["t"], arr)


class TestFingerprint:
    def test_key_order_irrelevant(self):
        assert fingerprint({"a": 1, "b": 2}) == fingerprint({"b": 2, "a": 1})
        assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'

    def test_sensitive(self):
        assert fingerprint({"a": 1}) != fingerprint({"a": 2})
        assert len(fingerprint({})) == 32
