"""
Little-endian binary codecs for the dataset (FMDS) and checkpoint (FMCK)
files, plus the plain-text dataset manifest.

Dataset layout:
    header  <4s H I I I I I I>  magic, version, n, H, W, C_1, C_2, K
    sample  <f4>[H,W,C_1]  <f4>[H,W,C_2]  u8[K] multilabel  <u2 single_label

Checkpoint layout:
    <4s H>                  magic, version
    <I> + bytes             run config (key=value text)
    tensor table            parameters
    tensor table, tensor table, <Q> t, <4d> beta1 beta2 eps weight_decay
    <Q>                     step
    <I> + bytes             rng state (JSON)
    <I> + <Q d d>*          loss trace (step, lr, loss)

A tensor table is <I> count, then per tensor: <H> name length, name bytes,
<B> rank, <I>*rank extents, <f4> payload.
"""
import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Tuple, Union

import numpy as np

from config import parse_key_values
from errors import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
    DatasetCorruptError,
    DatasetError,
)
from schemas import DatasetManifest

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"FMDS"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sHIIIIII")

CHECKPOINT_MAGIC = b"FMCK"
CHECKPOINT_VERSION = 1

PathLike = Union[str, Path]


# --- dataset ---

@dataclass
class DatasetArrays:
    n: int
    H: int
    W: int
    C_1: int
    C_2: int
    K: int
    image_1: np.ndarray  # [n, H, W, C_1] f32
    image_2: np.ndarray  # [n, H, W, C_2] f32
    multilabel: np.ndarray  # [n, K] u8
    single_label: np.ndarray  # [n] u16


def _sample_dtype(H: int, W: int, C_1: int, C_2: int, K: int) -> np.dtype:
    return np.dtype([
        ("image_1", "<f4", (H, W, C_1)),
        ("image_2", "<f4", (H, W, C_2)),
        ("multilabel", "u1", (K,)),
        ("single_label", "<u2"),
    ])


def write_dataset_header(handle: BinaryIO, n: int, H: int, W: int, C_1: int, C_2: int, K: int) -> None:
    handle.write(_DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, H, W, C_1, C_2, K))


def write_dataset_sample(handle: BinaryIO, sample) -> None:
    handle.write(np.ascontiguousarray(sample.image_1, dtype="<f4").tobytes())
    handle.write(np.ascontiguousarray(sample.image_2, dtype="<f4").tobytes())
    handle.write(np.asarray(sample.multilabel, dtype=np.uint8).tobytes())
    handle.write(struct.pack("<H", int(sample.single_label)))


def read_dataset(path: PathLike) -> DatasetArrays:
    dataset_path = Path(path)
    if not dataset_path.is_file():
        raise DatasetError(f"Dataset not found: {path}")
    raw = dataset_path.read_bytes()
    if len(raw) < _DATASET_HEADER.size:
        raise DatasetCorruptError(f"{path}: file shorter than the dataset header")
    magic, version, n, H, W, C_1, C_2, K = _DATASET_HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise DatasetCorruptError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetCorruptError(f"{path}: unsupported dataset version {version}")

    dtype = _sample_dtype(H, W, C_1, C_2, K)
    expected = _DATASET_HEADER.size + n * dtype.itemsize
    if len(raw) != expected:
        raise DatasetCorruptError(f"{path}: expected {expected} bytes for {n} samples, found {len(raw)}")

    records = np.frombuffer(raw, dtype=dtype, count=n, offset=_DATASET_HEADER.size)
    arrays = DatasetArrays(
        n=n, H=H, W=W, C_1=C_1, C_2=C_2, K=K,
        image_1=records["image_1"].astype(np.float32),
        image_2=records["image_2"].astype(np.float32),
        multilabel=records["multilabel"].astype(np.uint8),
        single_label=records["single_label"].astype(np.uint16),
    )
    if not (np.all(np.isfinite(arrays.image_1)) and np.all(np.isfinite(arrays.image_2))):
        raise DatasetCorruptError(f"{path}: non-finite pixels")
    logger.info(f"Loaded dataset {path}: n={n}, {H}x{W}, C=({C_1},{C_2}), K={K}")
    return arrays


def file_checksum(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def manifest_path(dataset_path: PathLike) -> Path:
    dataset_path = Path(dataset_path)
    return dataset_path.with_name(dataset_path.name + ".manifest")


def write_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    out = Path(path)
    out.write_text(manifest.to_text(), encoding="utf-8")
    return out


def read_manifest(path: PathLike) -> DatasetManifest:
    manifest_file = Path(path)
    if not manifest_file.is_file():
        raise DatasetError(f"Manifest not found: {path}")
    values = parse_key_values(manifest_file.read_text(encoding="utf-8"), source=str(manifest_file))
    return DatasetManifest.model_validate(values)


# --- checkpoint ---

@dataclass
class CheckpointRecord:
    """Raw decoded checkpoint contents; typed by the checkpoint service."""
    config_text: str
    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int
    hyper: Tuple[float, float, float, float]
    step: int
    rng_state: str
    trace: List[Tuple[int, float, float]] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION


def _write_blob(out: io.BytesIO, payload: bytes) -> None:
    out.write(struct.pack("<I", len(payload)))
    out.write(payload)


def _write_table(out: io.BytesIO, table: Dict[str, np.ndarray]) -> None:
    out.write(struct.pack("<I", len(table)))
    for name, array in table.items():
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", array.ndim))
        out.write(struct.pack(f"<{array.ndim}I", *array.shape))
        out.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def encode_checkpoint(record: CheckpointRecord) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<4sH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
    _write_blob(out, record.config_text.encode("utf-8"))
    _write_table(out, record.params)
    _write_table(out, record.m)
    _write_table(out, record.v)
    out.write(struct.pack("<Q", record.t))
    out.write(struct.pack("<4d", *record.hyper))
    out.write(struct.pack("<Q", record.step))
    _write_blob(out, record.rng_state.encode("utf-8"))
    out.write(struct.pack("<I", len(record.trace)))
    for step, lr, loss in record.trace:
        out.write(struct.pack("<Qdd", step, lr, loss))
    return out.getvalue()


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CheckpointCorruptError(f"{self.source}: truncated at byte {self.pos} (need {size} more)")
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (length,) = self.unpack("<I")
        return self.take(length)

    def table(self) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        table: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = self.unpack("<H")
            try:
                name = self.take(name_len).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CheckpointCorruptError(f"{self.source}: undecodable tensor name") from exc
            (rank,) = self.unpack("<B")
            shape = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = self.take(4 * size)
            table[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        return table


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> CheckpointRecord:
    reader = _Reader(raw, source)
    magic, version = reader.unpack("<4sH")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{source}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")

    try:
        config_text = reader.blob().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointCorruptError(f"{source}: config block is not UTF-8") from exc
    params = reader.table()
    m = reader.table()
    v = reader.table()
    (t,) = reader.unpack("<Q")
    hyper = reader.unpack("<4d")
    (step,) = reader.unpack("<Q")
    try:
        rng_state = reader.blob().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointCorruptError(f"{source}: rng state is not UTF-8") from exc
    (n_trace,) = reader.unpack("<I")
    trace = [reader.unpack("<Qdd") for _ in range(n_trace)]
    if reader.pos != len(raw):
        raise CheckpointCorruptError(f"{source}: {len(raw) - reader.pos} trailing bytes")

    return CheckpointRecord(
        config_text=config_text, params=params, m=m, v=v, t=t, hyper=tuple(hyper), step=step,
        rng_state=rng_state, trace=[(int(s), float(lr), float(loss)) for s, lr, loss in trace], version=version,
    )


def write_checkpoint_file(path: PathLike, record: CheckpointRecord) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(record)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(out)
    logger.info(f"Checkpoint written: {out} ({len(payload)} bytes, step {record.step})")
    return out


def read_checkpoint_file(path: PathLike) -> CheckpointRecord:
    checkpoint_path = Path(path)
    if not checkpoint_path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return decode_checkpoint(checkpoint_path.read_bytes(), source=str(checkpoint_path))
