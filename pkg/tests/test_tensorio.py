"""Tests for the binary (Q, K, V) container."""

import struct

import numpy as np
import pytest

from routedattn.tensorio import (
    HEADER,
    MAGIC,
    VERSION,
    TensorFormatError,
    read_tensor_file,
    write_tensor_file,
)


def sample_arrays(seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(5, 3)).astype(dtype)
    k = rng.normal(size=(7, 3)).astype(dtype)
    v = rng.normal(size=(7, 4)).astype(dtype)
    return q, k, v


class TestRoundTrip:
    def test_double_is_bitwise(self, tmp_path):
        path = tmp_path / "inst.qkv"
        q, k, v = sample_arrays()
        write_tensor_file(path, q, k, v)
        q2, k2, v2 = read_tensor_file(path)
        assert np.array_equal(q, q2) and q2.dtype == np.float64
        assert np.array_equal(k, k2)
        assert np.array_equal(v, v2)

    def test_single_is_bitwise(self, tmp_path):
        path = tmp_path / "inst32.qkv"
        q, k, v = sample_arrays(dtype=np.float32)
        write_tensor_file(path, q, k, v, precision="single")
        q2, k2, v2 = read_tensor_file(path)
        assert np.array_equal(q, q2) and q2.dtype == np.float32
        assert np.array_equal(k, k2)
        assert np.array_equal(v, v2)

    def test_write_casts_to_requested_precision(self, tmp_path):
        path = tmp_path / "cast.qkv"
        q, k, v = sample_arrays()
        write_tensor_file(path, q, k, v, precision="single")
        q2, _, _ = read_tensor_file(path)
        assert q2.dtype == np.float32
        assert np.array_equal(q2, q.astype(np.float32))

    def test_header_is_32_bytes(self, tmp_path):
        path = tmp_path / "hdr.qkv"
        q, k, v = sample_arrays()
        write_tensor_file(path, q, k, v)
        assert HEADER.size == 32
        blob = path.read_bytes()
        assert blob[:4] == MAGIC
        assert len(blob) == 32 + (5 * 3 + 7 * 3 + 7 * 4) * 8

    def test_zero_row_arrays_round_trip(self, tmp_path):
        path = tmp_path / "empty.qkv"
        q = np.zeros((0, 4))
        k = np.zeros((3, 4))
        v = np.zeros((3, 2))
        write_tensor_file(path, q, k, v)
        q2, k2, v2 = read_tensor_file(path)
        assert q2.shape == (0, 4)
        assert np.array_equal(k, k2)


class TestWriteValidation:
    def test_rejects_non_2d(self, tmp_path):
        q, k, v = sample_arrays()
        with pytest.raises(ValueError, match="2-D"):
            write_tensor_file(tmp_path / "bad.qkv", q.ravel(), k, v)

    def test_rejects_unknown_precision(self, tmp_path):
        q, k, v = sample_arrays()
        with pytest.raises(ValueError, match="precision"):
            write_tensor_file(tmp_path / "bad.qkv", q, k, v, precision="half")


class TestReadRejection:
    def write_good(self, path):
        q, k, v = sample_arrays()
        write_tensor_file(path, q, k, v)
        return path.read_bytes()

    def test_short_header(self, tmp_path):
        path = tmp_path / "short.qkv"
        path.write_bytes(b"QKV")
        with pytest.raises(TensorFormatError, match="too short"):
            read_tensor_file(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "magic.qkv"
        blob = bytearray(self.write_good(path))
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="magic"):
            read_tensor_file(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "ver.qkv"
        blob = bytearray(self.write_good(path))
        struct.pack_into("<H", blob, 4, VERSION + 1)
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="version"):
            read_tensor_file(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = tmp_path / "dtype.qkv"
        blob = bytearray(self.write_good(path))
        blob[6] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="dtype code"):
            read_tensor_file(path)

    def test_nonzero_reserved_byte(self, tmp_path):
        path = tmp_path / "resv.qkv"
        blob = bytearray(self.write_good(path))
        blob[7] = 1
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="reserved"):
            read_tensor_file(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.qkv"
        blob = self.write_good(path)
        path.write_bytes(blob[:-8])
        with pytest.raises(TensorFormatError, match="size mismatch"):
            read_tensor_file(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "trail.qkv"
        blob = self.write_good(path)
        path.write_bytes(blob + b"\x00\x00")
        with pytest.raises(TensorFormatError, match="trailing"):
            read_tensor_file(path)

    def test_error_type_is_value_error(self, tmp_path):
        # Callers that only catch ValueError still see malformed files.
        path = tmp_path / "short2.qkv"
        path.write_bytes(b"")
        with pytest.raises(ValueError):
            read_tensor_file(path)
