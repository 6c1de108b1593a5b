#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

import argparse
import gzip
import itertools
import os

import numpy as np
import pytest
import torch

from helpers import BaseReader as reader
from utils.exceptions import DatasetFormatError, ValidationError


def test_synthetic_is_seeded_and_balanced():
    a = reader.synthetic_blobs(4, 10, 16, seed=3)
    b = reader.synthetic_blobs(4, 10, 16, seed=3)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert a.images.dtype == torch.float32 and a.images.shape == (40, 3, 16, 16)
    assert torch.bincount(a.labels).tolist() == [10, 10, 10, 10]
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert not torch.equal(a.images, reader.synthetic_blobs(4, 10, 16, seed=4).images)


@pytest.mark.parametrize("difficulty", ["simple", "complex"])
def test_synthetic_class_means_are_separated(difficulty):
    data = reader.synthetic_blobs(5, 40, 16, seed=0, difficulty=difficulty)
    means = [data.images[data.labels == c].mean(dim=0) for c in range(5)]
    for i, j in itertools.combinations(range(5), 2):
        assert torch.linalg.vector_norm(means[i] - means[j]).item() > 1.0


def test_synthetic_contracts():
    with pytest.raises(ValidationError):
        reader.synthetic_blobs(3, 2, 6, seed=0)
    with pytest.raises(ValidationError):
        reader.synthetic_blobs(3, 2, 8, seed=0, difficulty="hard")


def write_mnist_like(root, n=5, size=28, gz=False):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, size, size), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    suffix = ".gz" if gz else ""
    reader.write_idx(os.path.join(root, "train-images-idx3-ubyte" + suffix), images)
    reader.write_idx(os.path.join(root, "train-labels-idx1-ubyte" + suffix), labels)
    reader.write_idx(os.path.join(root, "t10k-images-idx3-ubyte" + suffix), images[:2])
    reader.write_idx(os.path.join(root, "t10k-labels-idx1-ubyte" + suffix), labels[:2])
    return images, labels


@pytest.mark.parametrize("gz", [False, True])
def test_idx_files_load_and_scale(tmp_path, gz):
    images, labels = write_mnist_like(str(tmp_path), gz=gz)
    suffix = ".gz" if gz else ""
    data = reader.load_idx(
        os.path.join(tmp_path, "train-images-idx3-ubyte" + suffix),
        os.path.join(tmp_path, "train-labels-idx1-ubyte" + suffix),
    )
    assert data.images.shape == (5, 1, 28, 28)
    assert data.images[0, 0, 0, 0].item() == 1.0
    assert np.allclose(data.images[:, 0].numpy() * 255.0, images)
    assert data.labels.tolist() == labels.tolist()


def test_idx_format_errors(tmp_path):
    path = os.path.join(tmp_path, "images")
    reader.write_idx(path, np.zeros((3, 4, 4), dtype=np.uint8))
    with open(path, "rb") as f:
        buf = f.read()
    with open(path, "wb") as f:
        f.write(buf[:-7])
    with pytest.raises(DatasetFormatError) as e:
        reader.read_idx(path)
    assert "declared 48 bytes, found 41" in str(e.value)
    assert e.value.offset == 16 + 41

    with open(path, "wb") as f:
        f.write(b"\x00\x00\x0d\x03" + buf[4:])
    with pytest.raises(DatasetFormatError) as e:
        reader.read_idx(path)
    assert e.value.offset == 0


def test_cifar_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(4, 3, 32, 32), dtype=np.uint8)
    labels = np.array([0, 9, 3, 3], dtype=np.uint8)
    path = os.path.join(tmp_path, "batch.bin")
    reader.write_cifar_bin(path, images, labels)
    assert os.path.getsize(path) == 4 * 3073
    data = reader.load_cifar_bin(path)
    assert data.labels.tolist() == [0, 9, 3, 3]
    assert np.array_equal(np.rint(data.images.numpy() * 255.0).astype(np.uint8), images)

    fine = np.array([99, 5, 0, 42], dtype=np.uint8)
    path100 = os.path.join(tmp_path, "train.bin")
    reader.write_cifar_bin(path100, images, fine, coarse_labels=np.array([1, 2, 3, 4]))
    data = reader.load_cifar_bin(path100, label_bytes=2)
    assert data.labels.tolist() == [99, 5, 0, 42] and data.num_classes == 100


def test_cifar_length_must_be_whole_records(tmp_path):
    path = os.path.join(tmp_path, "broken.bin")
    with open(path, "wb") as f:
        f.write(bytes(3073 + 10))
    with pytest.raises(DatasetFormatError) as e:
        reader.load_cifar_bin(path)
    assert e.value.offset == 3073


def test_augment_keeps_shape_and_is_seeded():
    images = torch.rand(6, 3, 8, 8)
    a = reader.augment_batch(images, torch.Generator().manual_seed(0))
    b = reader.augment_batch(images, torch.Generator().manual_seed(0))
    assert a.shape == images.shape and torch.equal(a, b)
    flipped = reader.augment_batch(images, torch.Generator().manual_seed(0), padding=0)
    for original, out in zip(images, flipped):
        assert torch.equal(out, original) or torch.equal(out, original.flip(-1))


def reader_args(**changes):
    args = argparse.Namespace(
        data_dir="", dataset=reader.SYNTHETIC_SIMPLE, n_per_class=8, num_classes=4, seed=0, image_size=16
    )
    for k, v in changes.items():
        setattr(args, k, v)
    return args


def test_reader_builds_synthetic_splits():
    corpus = reader.BaseReader(reader_args())
    train, test = corpus.data_dict["train"], corpus.data_dict["test"]
    assert (len(train), len(test)) == (32, 8)
    assert (corpus.num_classes, corpus.channels, corpus.image_size) == (4, 3, 16)
    assert not torch.equal(train.images[:8], test.images)


def test_reader_resolves_mnist_files(tmp_path):
    write_mnist_like(str(tmp_path), n=6, gz=True)
    corpus = reader.BaseReader(reader_args(data_dir=str(tmp_path), dataset=reader.MNIST))
    assert len(corpus.data_dict["train"]) == 6 and len(corpus.data_dict["test"]) == 2
    assert corpus.channels == 1 and corpus.image_size == 28
    with pytest.raises(FileNotFoundError):
        reader.BaseReader(reader_args(data_dir=str(tmp_path / "missing"), dataset=reader.MNIST))


def test_dataset_validation():
    with pytest.raises(ValidationError):
        reader.Dataset(torch.zeros(2, 3, 4, 5), torch.zeros(2))
    with pytest.raises(ValidationError):
        reader.Dataset(torch.zeros(2, 3, 4, 4), torch.tensor([0, 10]), num_classes=10)
    data = reader.Dataset(torch.zeros(5, 1, 4, 4), torch.tensor([0, 1, 2, 1, 0]), num_classes=3)
    assert len(data.subset(3)) == 3 and data[4][reader.LABELS].item() == 0
