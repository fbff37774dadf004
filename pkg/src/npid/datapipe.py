"""Datasets, splits and training-time augmentation.

Labels live on :class:`Dataset` only. The trainer receives a :class:`TrainView`,
which is built from images alone and has no way to reach the labels.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ConfigError
from .streams import Streams

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
LUMA = np.array([0.299, 0.587, 0.114])


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Images plus evaluation labels.

    ``images`` holds raw values (uint8 for CIFAR, float for synthetic data);
    ``pixels`` maps them to ``[0, 1]`` scale and ``batch`` additionally
    applies the stored per-channel standardization.
    """

    images: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    pixel_scale: float = 1.0
    name: str = "dataset"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(
                f"images {self.images.shape} and labels {self.labels.shape} do not align"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def instance_ids(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean, self.std

    def pixels(self, indices) -> np.ndarray:
        return self.images[indices].astype(np.float64) / self.pixel_scale

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]

    def batch(self, indices) -> np.ndarray:
        return self.standardize(self.pixels(indices))

    def all_inputs(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))

    def subset(self, indices, name: str | None = None) -> "Dataset":
        """New dataset over ``indices``; instance ids are renumbered from 0."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.mean, self.std,
                       self.pixel_scale, name or self.name, dict(self.extras))

    def train_view(self, augment: "AugmentConfig | None" = None, seed: int = 0) -> "TrainView":
        return TrainView(self.images, self.mean, self.std, self.pixel_scale, augment, seed)


class TrainView:
    """What the training loop may see: images and instance ids, nothing else."""

    __slots__ = ("_images", "_mean", "_std", "_scale", "_augment", "_streams")

    def __init__(self, images, mean, std, pixel_scale=1.0, augment=None, seed: int = 0):
        self._images = images
        self._mean = np.asarray(mean, dtype=np.float64)
        self._std = np.asarray(std, dtype=np.float64)
        self._scale = pixel_scale
        self._augment = augment if augment is not None and augment.enabled else None
        self._streams = Streams(seed)

    def __len__(self) -> int:
        return len(self._images)

    @property
    def instance_ids(self) -> np.ndarray:
        return np.arange(len(self._images))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self._images.shape[1:])

    def batch(self, indices, epoch: int = 0) -> np.ndarray:
        x = self._images[indices].astype(np.float64) / self._scale
        if self._augment is not None:
            x = np.stack([
                augment(img, self._augment, self._streams.keyed("augment", epoch, int(i)))
                for img, i in zip(x, indices)
            ])
        return (x - self._mean[None, :, None, None]) / self._std[None, :, None, None]


def channel_stats(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = pixels.mean(axis=(0, 2, 3))
    std = pixels.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


# --- CIFAR-10 binary format -------------------------------------------------

def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DataError(
            f"{source}: expected a positive multiple of {CIFAR_RECORD} bytes "
            f"(e.g. {max(whole, 1) * CIFAR_RECORD}), got {len(raw)}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{source}: label byte {int(labels.max())} outside [0, 9]")
    return rec[:, 1:].reshape(-1, *CIFAR_SHAPE).copy(), labels


def serialize_cifar10(images: np.ndarray, labels) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3072)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([labels, images], axis=1).tobytes()


def write_cifar10_batch(path, images, labels) -> None:
    Path(path).write_bytes(serialize_cifar10(images, labels))


def load_cifar10(directory, split: str = "train", stats: tuple | None = None) -> Dataset:
    """Parse the binary CIFAR-10 distribution.

    Standardization constants come from the training split; pass the train
    dataset's ``(mean, std)`` as ``stats`` when loading the test split.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"CIFAR-10 directory {directory} does not exist")
    names = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}.get(split)
    if names is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    images, labels = [], []
    for name in names:
        path = directory / name
        if not path.is_file():
            raise DataError(f"missing CIFAR-10 batch file {path}")
        x, y = parse_cifar10_bytes(path.read_bytes(), str(path))
        images.append(x)
        labels.append(y)
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    if stats is None:
        if split != "train":
            stats = load_cifar10(directory, "train").stats
        else:
            stats = channel_stats(images.astype(np.float64) / 255.0)
    return Dataset(images, labels, np.asarray(stats[0]), np.asarray(stats[1]), 255.0,
                   f"cifar10-{split}")


def find_cifar10(path=None) -> Path | None:
    """Locate a CIFAR-10 binary directory from ``path`` or ``$NPID_CIFAR10_DIR``."""
    for cand in (path, os.environ.get("NPID_CIFAR10_DIR")):
        if not cand:
            continue
        cand = Path(cand)
        for d in (cand, cand / "cifar-10-batches-bin"):
            if (d / CIFAR_TRAIN_FILES[0]).is_file():
                return d
    return None


# --- synthetic clusters -----------------------------------------------------

def synth_clusters(num_clusters: int, per_cluster: int, dim_ambient: int, noise_sigma: float,
                   seed: int) -> Dataset:
    """Points ``normalize(center + noise)`` around random unit centers.

    ``noise_sigma`` is the RMS length of the noise vector (per-coordinate std
    ``noise_sigma / sqrt(dim_ambient)``), so cluster tightness does not depend
    on the ambient dimension.

    Returned as ``[N, dim, 1, 1]`` "images" so the common encoder applies; the
    centers are kept in ``extras["centers"]``.
    """
    if num_clusters < 2:
        raise ValueError(f"need at least two clusters, got {num_clusters}")
    if per_cluster < 1 or dim_ambient < 1 or noise_sigma < 0:
        raise ValueError("per_cluster and dim_ambient must be >= 1 and noise_sigma >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_clusters, dim_ambient))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_clusters), per_cluster)
    scale = noise_sigma / np.sqrt(dim_ambient)
    pts = centers[labels] + scale * rng.standard_normal((labels.size, dim_ambient))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    ones = np.ones(dim_ambient)
    return Dataset(pts[:, :, None, None], labels, np.zeros(dim_ambient), ones, 1.0,
                   f"synth-{num_clusters}x{per_cluster}", {"centers": centers})


def cluster_geometry(ds: Dataset) -> tuple[float, float]:
    """(min angle between centers, 99th-percentile point-to-center angle), radians."""
    centers = ds.extras["centers"]
    pts = ds.images[:, :, 0, 0]
    cos_cc = np.clip(centers @ centers.T, -1.0, 1.0)
    np.fill_diagonal(cos_cc, -1.0)
    min_center = float(np.arccos(cos_cc.max()))
    cos_pc = np.clip(np.einsum("nd,nd->n", pts, centers[ds.labels]), -1.0, 1.0)
    return min_center, float(np.percentile(np.arccos(cos_pc), 99))


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(len(ds) * (1 - test_fraction)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


def fraction_subset(ds: Dataset, fraction: float, seed: int) -> Dataset:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return ds
    k = max(1, int(round(len(ds) * fraction)))
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[:k]))


# --- augmentation -----------------------------------------------------------

@dataclass
class AugmentConfig:
    enabled: bool = True
    random_crop: bool = True
    crop_pad: int = 4
    crop_size: int | None = None
    flip_prob: float = 0.5
    grayscale_prob: float = 0.2

    def __post_init__(self):
        for name in ("flip_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.crop_pad < 0:
            raise ValueError(f"crop_pad must be >= 0, got {self.crop_pad}")


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random crop, horizontal flip and grayscale on a ``[C, H, W]`` image in [0, 1].

    Four values are always drawn from ``rng`` so the decision for each step
    sits at a fixed stream position regardless of which steps are enabled.
    """
    c, h, w = image.shape
    size = cfg.crop_size or h
    pad = cfg.crop_pad
    u = rng.random(4)
    if not cfg.enabled:
        return image
    out = image
    if cfg.random_crop:
        if size > h + 2 * pad or size > w + 2 * pad:
            raise ConfigError(f"crop {size} larger than padded image {h + 2 * pad}x{w + 2 * pad}")
        if pad:
            out = np.pad(out, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        top = int(u[0] * (out.shape[1] - size + 1))
        left = int(u[1] * (out.shape[2] - size + 1))
        out = out[:, top : top + size, left : left + size]
    if u[2] < cfg.flip_prob:
        out = out[:, :, ::-1]
    if c == 3 and u[3] < cfg.grayscale_prob:
        out = np.broadcast_to(np.tensordot(LUMA, out, axes=1), out.shape)
    return np.ascontiguousarray(out)
