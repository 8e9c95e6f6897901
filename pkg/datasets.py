"""
Dataset registry and loaders.

Loaders register under an id with @register_dataset and return a DatasetBundle of
(C, H, W) float images in [0, 1] with integer labels. Built in:

- mnist: IDX files (optionally gzipped) read with torchvision, zero-padded from 28x28 to 32x32
- cifar10: the binary release (1 label byte + 3072 pixel bytes per record)
- synthetic: Gaussian blobs around random class prototypes, deterministic per seed
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.datasets.mnist import read_image_file, read_label_file
from torchvision.datasets.utils import extract_archive

from diffcore import RandomStream
from errors import ConfigError, CorruptDataset, InvalidInput

logger = logging.getLogger("datasets")
logger.setLevel(logging.DEBUG)

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(frozen=True)
class ImageDataset:
    images: torch.Tensor  # (N, C, H, W), float32 in [0, 1]
    labels: torch.Tensor  # (N,), int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise InvalidInput(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: Union[Sequence[int], torch.Tensor]) -> "ImageDataset":
        index = torch.as_tensor(indices, dtype=torch.long)
        return ImageDataset(self.images[index], self.labels[index])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass(frozen=True)
class DatasetBundle:
    name: str
    train: ImageDataset
    test: ImageDataset
    num_classes: int

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.train.image_shape


DatasetLoader = Callable[..., DatasetBundle]
_REGISTRY: Dict[str, DatasetLoader] = {}


def register_dataset(name: str) -> Callable[[DatasetLoader], DatasetLoader]:
    def decorator(loader: DatasetLoader) -> DatasetLoader:
        _REGISTRY[name] = loader
        return loader

    return decorator


def available_datasets() -> List[str]:
    return sorted(_REGISTRY)


def load_dataset(
    name: str,
    path: Optional[Union[str, Path]] = None,
    limit: Optional[int] = None,
    test_limit: Optional[int] = None,
    **options,
) -> DatasetBundle:
    """Load a registered dataset; `limit`/`test_limit` keep the first N samples of each split"""
    if name not in _REGISTRY:
        raise ConfigError(f"Unknown dataset {name!r}; registered: {available_datasets()}")
    bundle = _REGISTRY[name](Path(path) if path is not None else None, **options)
    train, test = bundle.train, bundle.test
    if limit is not None:
        train = train.subset(range(min(limit, len(train))))
    if test_limit is not None:
        test = test.subset(range(min(test_limit, len(test))))
    logger.info(f"📋 Dataset {name}: {len(train)} train / {len(test)} test, shape {train.image_shape}")
    return DatasetBundle(bundle.name, train, test, bundle.num_classes)


def _decompressed(path: Path) -> Path:
    """Path of the uncompressed IDX file, extracting a .gz next to it on first use"""
    if path.suffix != ".gz":
        return path
    target = path.with_suffix("")
    if not target.exists():
        logger.info(f"📦 Extracting {path.name}")
        extract_archive(str(path))
    return target


def read_idx(path: Path, kind: Literal["images", "labels"]) -> torch.Tensor:
    """IDX image (N, H, W) uint8 or label (N,) int64 tensor"""
    reader = read_image_file if kind == "images" else read_label_file
    try:
        return reader(str(_decompressed(path)))
    except (AssertionError, EOFError, OSError, RuntimeError, TypeError, ValueError) as exc:
        raise CorruptDataset(f"{path} is not a valid IDX {kind} file: {exc}") from exc


def _find(root: Path, stem: str) -> Path:
    for folder in (root, root / "MNIST" / "raw", root / "mnist"):
        for candidate in (folder / stem, folder / f"{stem}.gz"):
            if candidate.exists():
                return candidate
    raise ConfigError(f"MNIST file {stem} not found under {root}")


def _mnist_split(root: Path, prefix: str) -> ImageDataset:
    images = read_idx(_find(root, f"{prefix}-images-idx3-ubyte"), "images")
    labels = read_idx(_find(root, f"{prefix}-labels-idx1-ubyte"), "labels")
    if images.shape[0] != labels.shape[0]:
        raise CorruptDataset(f"MNIST {prefix}: {images.shape[0]} images but {labels.shape[0]} labels")
    tensor = (images.to(torch.float32) / 255.0).unsqueeze(1)
    tensor = F.pad(tensor, (2, 2, 2, 2))
    return ImageDataset(tensor, labels.long())


@register_dataset("mnist")
def load_mnist(path: Optional[Path]) -> DatasetBundle:
    if path is None:
        raise ConfigError("MNIST needs a data directory (dataset.path or GILAB_DATA_DIR)")
    return DatasetBundle("mnist", _mnist_split(path, "train"), _mnist_split(path, "t10k"), 10)


def read_cifar_batch(path: Path) -> ImageDataset:
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise CorruptDataset(f"{path}: {raw.size} bytes is not a multiple of the {CIFAR_RECORD}-byte record")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise CorruptDataset(f"{path}: label byte {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return ImageDataset(torch.from_numpy(images), torch.from_numpy(labels))


def _concat(parts: Sequence[ImageDataset]) -> ImageDataset:
    return ImageDataset(torch.cat([p.images for p in parts]), torch.cat([p.labels for p in parts]))


@register_dataset("cifar10")
def load_cifar10(path: Optional[Path]) -> DatasetBundle:
    if path is None:
        raise ConfigError("CIFAR-10 needs a data directory (dataset.path or GILAB_DATA_DIR)")
    root = path / "cifar-10-batches-bin" if (path / "cifar-10-batches-bin").is_dir() else path
    train_files = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
    missing = [str(f) for f in train_files + [root / "test_batch.bin"] if not f.exists()]
    if missing:
        raise ConfigError(f"CIFAR-10 files missing: {missing}")
    train = _concat([read_cifar_batch(f) for f in train_files])
    return DatasetBundle("cifar10", train, read_cifar_batch(root / "test_batch.bin"), 10)


def _blobs(stream: RandomStream, prototypes: torch.Tensor, count: int, noise: float) -> ImageDataset:
    num_classes = prototypes.shape[0]
    labels = torch.arange(count) % num_classes
    labels = labels[stream.permutation(count)]
    images = prototypes[labels] + noise * stream.normal((count, *prototypes.shape[1:]))
    return ImageDataset(images.clamp(0.0, 1.0), labels)


@register_dataset("synthetic")
def load_synthetic(
    path: Optional[Path] = None,
    size: int = 2000,
    test_size: int = 500,
    num_classes: int = 10,
    shape: Tuple[int, int, int] = (3, 32, 32),
    noise: float = 0.15,
    seed: int = 0,
) -> DatasetBundle:
    """Gaussian blobs around smooth random class prototypes"""
    if size < num_classes or test_size < 1:
        raise InvalidInput(f"Synthetic dataset too small: size {size}, test_size {test_size}")
    stream = RandomStream(seed, "synthetic")
    coarse = stream.uniform((num_classes, shape[0], 4, 4))
    prototypes = F.interpolate(coarse, size=tuple(shape[1:]), mode="bilinear", align_corners=False)
    train = _blobs(stream.derive("train"), prototypes, size, noise)
    test = _blobs(stream.derive("test"), prototypes, test_size, noise)
    return DatasetBundle("synthetic", train, test, num_classes)
