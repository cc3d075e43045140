"""
Deterministic synthetic SAR / optical tile pairs.

A scene is a class map made of disks painted over background class 0. Disk
centers fall in the central quarter of each axis, so on square tiles the
middle of the tile is always covered and the corners are always background.
Both modalities render the same scene: the optical proxy with additive
Gaussian noise, the SAR proxy with multiplicative Gamma speckle in the log
domain. Background is the darkest class in every channel of both.
Sample i is produced from seed + i alone, so any sample regenerates
independently of the others.
"""
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

import storage
from config import settings
from errors import DatasetError
from schemas import DataConfig, DatasetManifest, ModelConfig

logger = logging.getLogger(__name__)


@dataclass
class SceneSpec:
    class_map: np.ndarray  # [H, W] int64
    K: int
    centers: List[Tuple[float, float]]
    radii: List[float]
    classes: List[int]
    seed: Optional[int] = None


@dataclass
class SamplePair:
    image_1: np.ndarray  # SAR proxy [H, W, C_1]
    image_2: np.ndarray  # optical proxy [H, W, C_2]
    multilabel: np.ndarray  # [K] uint8
    single_label: int

    def image(self, modality: int) -> np.ndarray:
        return self.image_1 if modality == 1 else self.image_2


# --- scene ---

def gen_scene(rng: np.random.Generator, H: int, W: int, K: int, n_blobs: int, seed: Optional[int] = None) -> SceneSpec:
    if K < 2:
        raise ValueError("K must be at least 2")
    if n_blobs < 1:
        raise ValueError("n_blobs must be at least 1")

    class_map = np.zeros((H, W), dtype=np.int64)
    rows, cols = np.mgrid[0:H, 0:W]
    side = min(H, W)
    centers, radii, classes = [], [], []
    for _ in range(n_blobs):
        cy = float(rng.uniform(3.0 * H / 8.0, 5.0 * H / 8.0))
        cx = float(rng.uniform(3.0 * W / 8.0, 5.0 * W / 8.0))
        radius = float(rng.uniform(side / 4.0, side / 3.0))
        label = int(rng.integers(1, K))
        disk = (rows + 0.5 - cy) ** 2 + (cols + 0.5 - cx) ** 2 <= radius * radius
        class_map[disk] = label
        centers.append((cy, cx))
        radii.append(radius)
        classes.append(label)
    return SceneSpec(class_map=class_map, K=K, centers=centers, radii=radii, classes=classes, seed=seed)


def scene_labels(scene: SceneSpec) -> Tuple[np.ndarray, int]:
    """Multilabel presence bits and the majority class (ties go to the lowest id)."""
    counts = np.bincount(scene.class_map.reshape(-1), minlength=scene.K)
    multilabel = (counts > 0).astype(np.uint8)
    return multilabel, int(np.argmax(counts))


# --- per-class lookups ---

def _unit_hash(kind: str, label: int, channel: int) -> float:
    digest = hashlib.blake2b(f"{kind}:{label}:{channel}".encode("ascii"), digest_size=8).digest()
    return int.from_bytes(digest, "little") / float(2 ** 64)


BACKGROUND_REFLECTANCE = 0.05
BACKGROUND_BACKSCATTER = 0.01


def optical_class_mean(label: int, channel: int) -> float:
    """Reflectance for a (class, channel) pair: background 0.05, other classes in [0.75, 0.95]."""
    if label == 0:
        return BACKGROUND_REFLECTANCE
    return 0.75 + 0.2 * _unit_hash("optical", label, channel)


def sar_backscatter(label: int, channel: int) -> float:
    """Mean backscatter intensity: background 0.01, other classes log-uniform in [0.1, 1.0]."""
    if label == 0:
        return BACKGROUND_BACKSCATTER
    return 10.0 ** (_unit_hash("sar", label, channel) - 1.0)


def _lookup(scene: SceneSpec, channels: int, fn) -> np.ndarray:
    table = np.array([[fn(k, c) for c in range(channels)] for k in range(scene.K)], dtype=np.float64)
    return table[scene.class_map]


def standardize(image: np.ndarray) -> np.ndarray:
    """Per-channel zero mean / unit variance over the sample; constant channels are only centered."""
    mean = image.mean(axis=(0, 1), keepdims=True)
    std = image.std(axis=(0, 1), keepdims=True)
    centered = image - mean
    return np.where(std > 0, centered / np.where(std > 0, std, 1.0), centered)


# --- renders ---

def render_optical(scene: SceneSpec, rng: np.random.Generator, C_2: int, noise_sigma: float,
                   standardized: bool = True) -> np.ndarray:
    clean = _lookup(scene, C_2, optical_class_mean)
    noisy = clean + rng.normal(0.0, 1.0, size=clean.shape) * noise_sigma
    image = np.clip(noisy, 0.0, 1.0)
    return (standardize(image) if standardized else image).astype(np.float32)


def speckle(rng: np.random.Generator, shape: Tuple[int, ...], looks: float) -> np.ndarray:
    """Multiplicative L-look intensity speckle, Gamma(shape=L, scale=1/L), mean 1."""
    if looks < 1:
        raise ValueError("looks must be at least 1")
    if math.isinf(looks):
        return np.ones(shape)
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def render_sar(scene: SceneSpec, rng: np.random.Generator, C_1: int, looks: float,
               standardized: bool = True) -> np.ndarray:
    backscatter = _lookup(scene, C_1, sar_backscatter)
    intensity = backscatter * speckle(rng, backscatter.shape, looks)
    image = np.log(np.maximum(intensity, 1e-12))
    return (standardize(image) if standardized else image).astype(np.float32)


def make_sample(index: int, seed: int, model: ModelConfig, data: DataConfig) -> SamplePair:
    sample_seed = seed + index
    rng = np.random.default_rng(sample_seed)
    scene = gen_scene(rng, model.H, model.W, data.K, data.n_blobs, seed=sample_seed)
    image_1 = render_sar(scene, rng, model.C_1, data.looks)
    image_2 = render_optical(scene, rng, model.C_2, data.noise_sigma)
    multilabel, single_label = scene_labels(scene)
    return SamplePair(image_1=image_1, image_2=image_2, multilabel=multilabel, single_label=single_label)


# --- dataset ---

def gen_dataset(
    n: int,
    seed: int,
    model: ModelConfig,
    data: DataConfig,
    path: str,
    workers: Optional[int] = None,
) -> DatasetManifest:
    """Render n samples (threaded), stream them to `path` in index order and write the manifest."""
    if n < 1:
        raise ValueError("n must be at least 1")
    workers = workers or settings.NUM_WORKERS
    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    logger.info(f"Generating {n} samples (seed={seed}, {model.H}x{model.W}, K={data.K}) with {workers} workers -> {out_path}")
    chunk = max(1, min(256, n))
    with open(out_path, "wb") as handle, ThreadPoolExecutor(max_workers=workers) as pool:
        storage.write_dataset_header(handle, n, model.H, model.W, model.C_1, model.C_2, data.K)
        for start in range(0, n, chunk):
            indices = range(start, min(n, start + chunk))
            # map() yields in submission order, so the file stays index-ordered
            for sample in pool.map(lambda i: make_sample(i, seed, model, data), indices):
                storage.write_dataset_sample(handle, sample)
            logger.debug(f"Wrote samples {start}..{indices[-1]}")

    manifest = DatasetManifest(
        path=str(out_path), n=n, seed=seed, H=model.H, W=model.W, C_1=model.C_1, C_2=model.C_2,
        K=data.K, n_blobs=data.n_blobs, noise_sigma=data.noise_sigma, looks=data.looks,
        checksum=storage.file_checksum(out_path),
    )
    storage.write_manifest(manifest, storage.manifest_path(out_path))
    logger.info(f"Dataset written: {out_path} checksum={manifest.checksum}")
    return manifest


class Dataset:
    """In-memory view over a dataset file's arrays."""

    def __init__(self, arrays: storage.DatasetArrays, indices: Optional[Sequence[int]] = None):
        self.arrays = arrays
        self.indices = np.arange(arrays.n) if indices is None else np.asarray(indices, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __getitem__(self, i: int) -> SamplePair:
        if not 0 <= i < len(self):
            raise IndexError(f"sample index {i} out of range for {len(self)} samples")
        j = int(self.indices[i])
        return SamplePair(
            image_1=self.arrays.image_1[j],
            image_2=self.arrays.image_2[j],
            multilabel=self.arrays.multilabel[j],
            single_label=int(self.arrays.single_label[j]),
        )

    def __iter__(self) -> Iterator[SamplePair]:
        for i in range(len(self)):
            yield self[i]

    @property
    def K(self) -> int:
        return self.arrays.K

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.arrays.H, self.arrays.W, self.arrays.C_1, self.arrays.C_2

    def multilabels(self) -> np.ndarray:
        return self.arrays.multilabel[self.indices]

    def single_labels(self) -> np.ndarray:
        return self.arrays.single_label[self.indices].astype(np.int64)

    def subset(self, positions: Sequence[int]) -> "Dataset":
        return Dataset(self.arrays, self.indices[np.asarray(positions, dtype=np.int64)])

    def split(self, test_fraction: float, seed: int) -> Tuple["Dataset", "Dataset"]:
        """Seeded (train, test) partition; both sides keep at least one sample."""
        if len(self) < 2:
            raise DatasetError("need at least two samples to split")
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = min(len(self) - 1, max(1, int(round(test_fraction * len(self)))))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))

    def check_compatible(self, model: ModelConfig) -> None:
        if self.shape != (model.H, model.W, model.C_1, model.C_2):
            raise DatasetError(
                f"dataset tiles {self.shape} do not match model (H, W, C_1, C_2)="
                f"{(model.H, model.W, model.C_1, model.C_2)}"
            )


def load_dataset(path: str) -> Dataset:
    return Dataset(storage.read_dataset(path))
