"""
Unit tests for the binary dataset / checkpoint codecs and the manifest.
"""
import struct

import numpy as np
import pytest

import storage
from errors import CheckpointCorruptError, CheckpointError, CheckpointVersionError, DatasetCorruptError, DatasetError


def record(**overrides):
    values = dict(
        config_text="seed=1\n",
        params={"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "a.b": np.ones(3, dtype=np.float32)},
        m={"a.w": np.zeros((2, 3), np.float32), "a.b": np.zeros(3, np.float32)},
        v={"a.w": np.full((2, 3), 0.5, np.float32), "a.b": np.zeros(3, np.float32)},
        t=3,
        hyper=(0.9, 0.95, 1e-8, 0.05),
        step=3,
        rng_state='{"state": 1}',
        trace=[(0, 0.0, 1.5), (1, 1e-4, 1.25), (2, 2e-4, 1.0)],
    )
    values.update(overrides)
    return storage.CheckpointRecord(**values)


class TestDatasetFile:
    """Test the FMDS dataset file."""

    def test_header_layout(self, dataset_path):
        """Test the fixed little-endian header."""
        raw = dataset_path.read_bytes()
        magic, version, n, H, W, C_1, C_2, K = struct.unpack_from("<4sHIIIIII", raw, 0)
        assert (magic, version, n, H, W, C_1, C_2, K) == (b"FMDS", 1, 16, 8, 8, 2, 3, 3)
        sample = 4 * 8 * 8 * (2 + 3) + 3 + 2
        assert len(raw) == struct.calcsize("<4sHIIIIII") + 16 * sample

    def test_truncated_file(self, dataset_path):
        """Test that a short file is reported corrupt."""
        dataset_path.write_bytes(dataset_path.read_bytes()[:-1])
        with pytest.raises(DatasetCorruptError):
            storage.read_dataset(dataset_path)

    def test_bad_magic(self, dataset_path):
        """Test magic validation."""
        raw = bytearray(dataset_path.read_bytes())
        raw[:4] = b"NOPE"
        dataset_path.write_bytes(bytes(raw))
        with pytest.raises(DatasetCorruptError):
            storage.read_dataset(dataset_path)

    def test_missing_file(self, tmp_path):
        """Test a path that does not exist."""
        with pytest.raises(DatasetError):
            storage.read_dataset(tmp_path / "absent.fmds")

    def test_manifest(self, dataset_path):
        """Test the manifest next to the dataset and its checksum."""
        manifest = storage.read_manifest(storage.manifest_path(dataset_path))
        assert manifest.n == 16 and manifest.seed == 7
        assert manifest.checksum == storage.file_checksum(dataset_path)
        assert storage.manifest_path(dataset_path).name == "train.fmds.manifest"


class TestCheckpointCodec:
    """Test the FMCK checkpoint codec."""

    def test_decode_reproduces_record(self):
        """Test that decoding gives back every field."""
        original = record()
        decoded = storage.decode_checkpoint(storage.encode_checkpoint(original))
        assert decoded.config_text == original.config_text
        assert list(decoded.params) == ["a.w", "a.b"]
        np.testing.assert_array_equal(decoded.v["a.w"], original.v["a.w"])
        assert decoded.hyper == original.hyper
        assert (decoded.t, decoded.step) == (3, 3)
        assert decoded.rng_state == original.rng_state
        assert decoded.trace == original.trace

    def test_encoding_is_deterministic(self):
        """Test byte-identical encodings of equal records."""
        assert storage.encode_checkpoint(record()) == storage.encode_checkpoint(record())

    def test_magic_and_version(self):
        """Test the leading magic and version fields."""
        raw = storage.encode_checkpoint(record())
        assert raw[:4] == b"FMCK"
        assert struct.unpack_from("<H", raw, 4)[0] == storage.CHECKPOINT_VERSION

    def test_truncated(self):
        """Test that every truncation point is detected."""
        raw = storage.encode_checkpoint(record())
        for cut in (3, 10, len(raw) // 2, len(raw) - 1):
            with pytest.raises(CheckpointCorruptError):
                storage.decode_checkpoint(raw[:cut])

    def test_trailing_bytes(self):
        """Test that extra bytes after the trace are refused."""
        with pytest.raises(CheckpointCorruptError):
            storage.decode_checkpoint(storage.encode_checkpoint(record()) + b"\x00")

    def test_future_version(self):
        """Test the version check."""
        raw = bytearray(storage.encode_checkpoint(record()))
        struct.pack_into("<H", raw, 4, storage.CHECKPOINT_VERSION + 1)
        with pytest.raises(CheckpointVersionError):
            storage.decode_checkpoint(bytes(raw))

    def test_file_round_trip(self, tmp_path):
        """Test the atomic file write leaves no temporary file."""
        path = storage.write_checkpoint_file(tmp_path / "run" / "ck.fmck", record())
        assert storage.read_checkpoint_file(path).step == 3
        assert not (tmp_path / "run" / "ck.fmck.tmp").exists()

    def test_missing_file(self, tmp_path):
        """Test a checkpoint path that does not exist."""
        with pytest.raises(CheckpointError):
            storage.read_checkpoint_file(tmp_path / "absent.fmck")
