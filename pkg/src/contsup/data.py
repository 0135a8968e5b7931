"""Dataset ingestion, the synthetic toy set, and deterministic batch iteration.

Images are stored as uint8 ``(N, C, H, W)`` tensors; batches are produced as
``(normalized, labels, unit_range)`` where ``unit_range`` is the augmented
image in ``[0, 1]`` (the reconstruction target).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, IngestionError

DATA_ROOT_ENV = "CONTSUP_DATA"
DATASETS = ("cifar10", "svhn", "stl10", "toy")

# pad/translate pixels and horizontal flip per dataset
AUGMENTATION = {
    "cifar10": (4, True),
    "svhn": (2, False),
    "stl10": (4, True),
    "toy": (1, False),
}

DOWNLOAD_HINT = (
    "dataset {name!r} not found under {root!r}. Run `contsup fetch-data {name} --root {root}` "
    "or set ${env} to a directory containing the torchvision-format files."
)


@dataclass
class ImageSplit:
    images: torch.Tensor  # uint8, N x C x H x W
    labels: torch.Tensor  # int64, N

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, n: int) -> "ImageSplit":
        return ImageSplit(self.images[:n], self.labels[:n])


@dataclass
class Dataset:
    name: str
    train: ImageSplit
    test: ImageSplit
    mean: tuple[float, ...]
    std: tuple[float, ...]
    num_classes: int = 10
    pad: int = 0
    flip: bool = False
    augment: bool = True

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.images.shape[1:])

    def normalize(self, unit: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=unit.dtype).view(1, -1, 1, 1)
        std = torch.tensor(self.std, dtype=unit.dtype).view(1, -1, 1, 1)
        return (unit - mean) / std

    def batches(
        self,
        split: str | ImageSplit,
        batch_size: int,
        shuffle: bool = False,
        generator: Optional[torch.Generator] = None,
        augment: Optional[bool] = None,
    ) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        data = getattr(self, split) if isinstance(split, str) else split
        n = len(data)
        if n == 0:
            raise ValueError("empty split")
        augment = self.augment if augment is None else augment
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            unit = data.images[idx].float().div_(255.0)
            if augment:
                unit = translate_flip(unit, self.pad, self.flip, generator)
            yield self.normalize(unit), data.labels[idx], unit


def translate_flip(x: torch.Tensor, pad: int, flip: bool, generator=None) -> torch.Tensor:
    """Zero-pad by ``pad`` and crop back at a random offset; optional random h-flip."""
    n, _, h, w = x.shape
    if pad > 0:
        padded = F.pad(x, (pad, pad, pad, pad))
        offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=generator)
        rows = (offs[:, 0, None] + torch.arange(h)[None, :])  # n x h
        cols = (offs[:, 1, None] + torch.arange(w)[None, :])  # n x w
        idx_r = rows[:, None, :, None].expand(n, x.shape[1], h, padded.shape[3])
        x = padded.gather(2, idx_r)
        idx_c = cols[:, None, None, :].expand(n, x.shape[1], h, w)
        x = x.gather(3, idx_c)
    if flip:
        mask = torch.rand(n, generator=generator) < 0.5
        x = torch.where(mask[:, None, None, None], x.flip(3), x)
    return x


# ---------------------------------------------------------------------------
# Toy data


@dataclass(frozen=True)
class ToyConfig:
    n_train: int = 2000
    n_test: int = 1000
    size: int = 16
    num_classes: int = 10
    seed: int = 0
    blob_sigma: float = 1.6
    jitter: float = 1.0
    color_noise: float = 0.15
    background_noise: float = 0.08
    distractors: int = 1


def _toy_signatures(cfg: ToyConfig, rng: np.random.Generator):
    # positions spread on a ring, colours random: both are needed to separate classes
    c = (cfg.size - 1) / 2
    radius = cfg.size / 4
    angles = 2 * np.pi * np.arange(cfg.num_classes) / cfg.num_classes + rng.uniform(0, 2 * np.pi)
    positions = np.stack([c + radius * np.sin(angles), c + radius * np.cos(angles)], axis=1)
    colors = rng.uniform(0.0, 1.0, size=(cfg.num_classes, 3))
    return positions, colors


def _render(cfg: ToyConfig, rng: np.random.Generator, labels, positions, colors):
    n, s = len(labels), cfg.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = 0.5 + cfg.background_noise * rng.standard_normal((n, 3, s, s))

    def blob(centers, cols, sigma):
        d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
        g = np.exp(-d2 / (2 * sigma**2))  # n x s x s
        return g[:, None] * (cols[:, :, None, None] - 0.5)

    centers = positions[labels] + cfg.jitter * rng.standard_normal((n, 2))
    cols = np.clip(colors[labels] + cfg.color_noise * rng.standard_normal((n, 3)), 0, 1)
    img += blob(centers, cols, cfg.blob_sigma)
    for _ in range(cfg.distractors):
        dc = rng.uniform(0, s - 1, size=(n, 2))
        dcol = rng.uniform(0, 1, size=(n, 3))
        img += 0.7 * blob(dc, dcol, cfg.blob_sigma)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def make_toy(cfg: ToyConfig = ToyConfig()) -> Dataset:
    """Class-structured Gaussian-blob images; identical output for identical ``cfg``.

    Every class owns a blob position and colour; samples jitter both and add
    background noise and randomly placed distractor blobs.
    """
    if cfg.num_classes < 2 or cfg.size < 8:
        raise ConfigError("toy data needs >= 2 classes and size >= 8")
    rng = np.random.default_rng(cfg.seed)
    positions, colors = _toy_signatures(cfg, np.random.default_rng(1_000_003 + cfg.seed))

    def split(n):
        labels = np.arange(n) % cfg.num_classes
        rng.shuffle(labels)
        imgs = _render(cfg, rng, labels, positions, colors)
        return ImageSplit(torch.from_numpy(imgs), torch.from_numpy(labels.astype(np.int64)))

    train, test = split(cfg.n_train), split(cfg.n_test)
    x = train.images.float() / 255.0
    mean = tuple(float(v) for v in x.mean(dim=(0, 2, 3)))
    std = tuple(float(v) for v in x.std(dim=(0, 2, 3)))
    pad, flip = AUGMENTATION["toy"]
    return Dataset("toy", train, test, mean, std, cfg.num_classes, pad, flip)


# ---------------------------------------------------------------------------
# Real datasets (torchvision on-disk formats)

CHANNEL_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "svhn": ((0.4377, 0.4438, 0.4728), (0.1980, 0.2010, 0.1970)),
    "stl10": ((0.4467, 0.4398, 0.4066), (0.2603, 0.2566, 0.2713)),
}


def data_root(root: Optional[str] = None) -> str:
    return root or os.environ.get(DATA_ROOT_ENV) or os.path.join(os.path.expanduser("~"), ".cache", "contsup")


def _tv_arrays(name: str, root: str, train: bool, download: bool):
    import torchvision.datasets as tvd

    try:
        if name == "cifar10":
            ds = tvd.CIFAR10(root, train=train, download=download)
            return np.transpose(ds.data, (0, 3, 1, 2)), np.asarray(ds.targets)
        if name == "svhn":
            ds = tvd.SVHN(root, split="train" if train else "test", download=download)
            return ds.data, np.asarray(ds.labels)
        if name == "stl10":
            ds = tvd.STL10(root, split="train" if train else "test", download=download)
            return ds.data, np.asarray(ds.labels)
    except RuntimeError as exc:  # torchvision's "Dataset not found or corrupted"
        raise IngestionError(DOWNLOAD_HINT.format(name=name, root=root, env=DATA_ROOT_ENV)) from exc
    raise ConfigError(f"unknown dataset {name!r}")


def load_dataset(
    name: str,
    root: Optional[str] = None,
    augmentation_on: bool = True,
    toy: ToyConfig = ToyConfig(),
    download: bool = False,
) -> Dataset:
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    if name == "toy":
        ds = make_toy(toy)
        ds.augment = augmentation_on
        return ds
    root = data_root(root)
    splits = []
    for train in (True, False):
        x, y = _tv_arrays(name, root, train, download)
        splits.append(ImageSplit(torch.from_numpy(np.ascontiguousarray(x, dtype=np.uint8)), torch.from_numpy(y.astype(np.int64))))
    mean, std = CHANNEL_STATS[name]
    pad, flip = AUGMENTATION[name]
    return Dataset(name, splits[0], splits[1], mean, std, 10, pad, flip, augmentation_on)


def fetch_dataset(name: str, root: Optional[str] = None) -> str:
    """Download a real dataset into ``root`` (explicit network access)."""
    if name == "toy":
        return "toy data is generated on demand"
    root = data_root(root)
    os.makedirs(root, exist_ok=True)
    for train in (True, False):
        _tv_arrays(name, root, train, download=True)
    return root
