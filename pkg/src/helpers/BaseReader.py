# -*- coding: UTF-8 -*-

import os
import gzip
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from torch.nn.functional import pad
from torch.utils.data import Dataset as BaseDataset

from utils.constants import *
from utils.exceptions import DatasetFormatError, ValidationError

SYNTHETIC_SIMPLE = "synthetic-simple"
SYNTHETIC_COMPLEX = "synthetic-complex"
MNIST = "mnist"
CIFAR10 = "cifar10"
CIFAR100 = "cifar100"
DATASETS = (SYNTHETIC_SIMPLE, SYNTHETIC_COMPLEX, MNIST, CIFAR10, CIFAR100)

CIFAR_PIXELS = 3 * 32 * 32


@dataclass(eq=False)
class Dataset(BaseDataset):
    """
    images: [N, C, S, S] in [0, 1]; labels: [N] in [0, num_classes)
    """

    images: torch.Tensor
    labels: torch.Tensor
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[2] != self.images.shape[3]:
            raise ValidationError(
                "images must be [N, C, S, S], got {}".format(tuple(self.images.shape))
            )
        if len(self.images) == 0 or len(self.labels) != len(self.images):
            raise ValidationError(
                "{} images and {} labels: need a nonempty, paired dataset".format(
                    len(self.images), len(self.labels)
                )
            )
        self.labels = self.labels.long()
        if self.labels.min().item() < 0 or self.labels.max().item() >= self.num_classes:
            raise ValidationError("labels outside [0, {})".format(self.num_classes))

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, index: int) -> dict:
        return {IMAGES: self.images[index], LABELS: self.labels[index]}

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def subset(self, n: int) -> "Dataset":
        n = min(n, len(self))
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes)


"""
Synthetic images
"""


def synthetic_blobs(
    num_classes: int,
    n_per_class: int,
    size: int,
    seed: int,
    difficulty: str = "simple",
    channels: int = 3,
    split: str = "train",
) -> Dataset:
    """
    Class-conditional Gaussian blobs. Each class owns a blob position on a circle
    and a colour; "complex" adds an oriented grating with random phase whose
    frequency and orientation also depend on the class.
    """
    if size < 8:
        raise ValidationError("synthetic images need size >= 8, got {}".format(size))
    if difficulty not in ("simple", "complex"):
        raise ValidationError("difficulty must be simple or complex, got {}".format(difficulty))
    if num_classes < 2 or n_per_class < 1:
        raise ValidationError("need >= 2 classes and >= 1 image per class")
    rng = np.random.default_rng(seed)
    n = num_classes * n_per_class
    labels = rng.permutation(np.repeat(np.arange(num_classes), n_per_class))

    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centres = (size - 1) / 2.0 + 0.3 * size * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    colours = rng.uniform(0.5, 1.0, size=(num_classes, channels))
    sigma = size / 8.0

    jitter = rng.uniform(-size / 16.0, size / 16.0, size=(n, 2))
    cx = centres[labels, 0] + jitter[:, 0]
    cy = centres[labels, 1] + jitter[:, 1]
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    blob = np.exp(
        -((xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2)
        / (2.0 * sigma ** 2)
    )
    images = colours[labels][:, :, None, None] * blob[:, None]
    noise_level = 0.05

    if difficulty == "complex":
        freq = 1.0 + (np.arange(num_classes) % 4)
        theta = np.pi * np.arange(num_classes) / num_classes
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
        proj = (
            xx[None] * np.cos(theta[labels])[:, None, None]
            + yy[None] * np.sin(theta[labels])[:, None, None]
        )
        grating = 0.5 + 0.5 * np.sin(
            2.0 * np.pi * freq[labels][:, None, None] * proj / size + phase[:, None, None]
        )
        images = 0.7 * images + 0.3 * grating[:, None]
        noise_level = 0.1

    images = images + rng.normal(0.0, noise_level, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(
        torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)), split, num_classes
    )


"""
IDX (MNIST)
"""


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path: str) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0 or buf[2] != 0x08:
        raise DatasetFormatError(path, 0, "bad IDX magic {!r}".format(buf[:4]))
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DatasetFormatError(path, len(buf), "truncated IDX header")
    dims = [int(v) for v in np.frombuffer(buf, dtype=">u4", count=ndim, offset=4)]
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(buf) - header
    if expected != actual:
        raise DatasetFormatError(
            path, header + min(expected, actual),
            "IDX payload length mismatch: declared {} bytes, found {}".format(expected, actual),
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str, array: np.ndarray):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + np.array(array.shape, dtype=">u4").tobytes()
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def load_idx(images_path: str, labels_path: str, split: str = "train", num_classes: int = 10) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DatasetFormatError(images_path, 3, "expected a rank-3 image file (magic 0x0803)")
    if labels.ndim != 1:
        raise DatasetFormatError(labels_path, 3, "expected a rank-1 label file (magic 0x0801)")
    scaled = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    return Dataset(scaled, torch.from_numpy(labels.astype(np.int64)), split, num_classes)


"""
CIFAR binary
"""


def load_cifar_bin(paths: Union[str, Sequence[str]], split: str = "train", label_bytes: int = 1) -> Dataset:
    """
    CIFAR-10 records are 1 label byte + 3072 pixels (R, G, B planes, row-major);
    CIFAR-100 records carry coarse and fine label bytes, the fine label is used.
    """
    if isinstance(paths, str):
        paths = [paths]
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        buf = _read_bytes(path)
        if len(buf) == 0 or len(buf) % record != 0:
            raise DatasetFormatError(
                path, len(buf) - len(buf) % record,
                "file length {} is not a multiple of the {}-byte record".format(len(buf), record),
            )
        rows = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
        labels.append(rows[:, label_bytes - 1].astype(np.int64))
        images.append(rows[:, label_bytes:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images).astype(np.float32) / 255.0
    num_classes = 10 if label_bytes == 1 else 100
    return Dataset(
        torch.from_numpy(pixels), torch.from_numpy(np.concatenate(labels)), split, num_classes
    )


def write_cifar_bin(path: str, images: np.ndarray, labels: np.ndarray, coarse_labels: Optional[np.ndarray] = None):
    images = np.ascontiguousarray(images, dtype=np.uint8).reshape(len(images), CIFAR_PIXELS)
    columns = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse_labels is not None:
        columns.insert(0, np.asarray(coarse_labels, dtype=np.uint8)[:, None])
    with open(path, "wb") as f:
        f.write(np.concatenate(columns + [images], axis=1).tobytes())


"""
Augmentation
"""


def augment_batch(images: torch.Tensor, generator: torch.Generator, padding: int = 4) -> torch.Tensor:
    """Random horizontal flip, then zero-pad by `padding` and crop back at a random offset."""
    B, _, S, _ = images.shape
    flip = torch.rand(B, generator=generator) < 0.5
    images = torch.where(flip[:, None, None, None], images.flip(-1), images)
    if padding <= 0:
        return images
    padded = pad(images, (padding, padding, padding, padding))
    offsets = torch.randint(0, 2 * padding + 1, (B, 2), generator=generator)
    return torch.stack(
        [padded[i, :, y:y + S, x:x + S] for i, (y, x) in enumerate(offsets.tolist())]
    )


class BaseReader(object):
    """
    Base data reader class: resolves a named dataset under --data-dir into train / test splits.
    """

    @staticmethod
    def parse_data_args(parser):
        """
        Parses command-line arguments related to data loading.
        :param parser: argparse.ArgumentParser, argument parser instance.
        :return: argparse.ArgumentParser, updated argument parser.
        """
        parser.add_argument(
            "--data-dir",
            type=str,
            default=os.environ.get(DATA_DIR_ENV, "../data"),
            help="Input data dir (default from ${}).".format(DATA_DIR_ENV),
        )
        parser.add_argument(
            "--dataset", type=str, default=SYNTHETIC_SIMPLE, choices=DATASETS,
            help="Choose a dataset.",
        )
        parser.add_argument(
            "--n-per-class", type=int, default=200, help="Synthetic images per class."
        )
        parser.add_argument(
            "--num-classes", type=int, default=10, help="Synthetic class count."
        )
        return parser

    def __init__(self, args):
        self.prefix = args.data_dir
        self.dataset = args.dataset
        self.seed = args.seed
        self.n_per_class = args.n_per_class
        self.synthetic_classes = args.num_classes
        self.synthetic_size = getattr(args, "image_size", None) or 32
        self._read_data()

    def _read_data(self):
        logging.info('Reading data from "{}", dataset = "{}" '.format(self.prefix, self.dataset))
        self.data_dict: Dict[str, Dataset] = dict()
        for split in ["train", "test"]:
            self.data_dict[split] = self._load_split(split)
        train = self.data_dict["train"]
        self.num_classes = train.num_classes
        self.channels = train.channels
        self.image_size = train.image_size
        for split in ["train", "test"]:
            logging.info("size of {}: {}".format(split, len(self.data_dict[split])))
        logging.info("Finish reading data.")

    def _load_split(self, split: str) -> Dataset:
        if self.dataset in (SYNTHETIC_SIMPLE, SYNTHETIC_COMPLEX):
            n = self.n_per_class if split == "train" else max(1, self.n_per_class // 4)
            return synthetic_blobs(
                self.synthetic_classes,
                n,
                self.synthetic_size,
                self.seed + (0 if split == "train" else 1),
                difficulty=self.dataset.split("-")[1],
                split=split,
            )
        if self.dataset == MNIST:
            stem = "train" if split == "train" else "t10k"
            return load_idx(
                self._resolve(stem + "-images-idx3-ubyte"),
                self._resolve(stem + "-labels-idx1-ubyte"),
                split,
            )
        if self.dataset == CIFAR10:
            root = os.path.join(self.prefix, "cifar-10-batches-bin")
            names = (
                ["data_batch_{}.bin".format(i) for i in range(1, 6)]
                if split == "train"
                else ["test_batch.bin"]
            )
            return load_cifar_bin([os.path.join(root, n) for n in names], split)
        root = os.path.join(self.prefix, "cifar-100-binary")
        return load_cifar_bin(os.path.join(root, split + ".bin"), split, label_bytes=2)

    def _resolve(self, name: str) -> str:
        for candidate in (name, name + ".gz"):
            path = os.path.join(self.prefix, candidate)
            if os.path.exists(path):
                return path
        raise FileNotFoundError("{} not found under {}".format(name, self.prefix))
