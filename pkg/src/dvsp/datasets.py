"""MNIST ingestion (IDX format) and verification / attack pair schedules."""
from __future__ import annotations

import gzip
import itertools
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .numerics import DTYPE, Rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledSet:
    """Images ``[n, 1, 28, 28]`` in [0, 1] with integer labels ``[n]``."""

    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, index) -> "LabeledSet":
        return LabeledSet(self.images[index], self.labels[index])


@dataclass
class SplitDataset:
    train: LabeledSet
    test: LabeledSet
    n_c: int


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic number 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise IdxFormatError(
            f"{path}: truncated or oversized payload, {len(raw) - header} bytes for dims {dims}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledSet:
    images = _parse_idx(images_path, IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images_path} has {images.shape[0]} images, "
            f"{labels_path} has {labels.shape[0]} labels"
        )
    if labels.size and labels.max() > 9:
        raise IdxFormatError(f"{labels_path}: label {labels.max()} out of range 0..9")
    x = torch.from_numpy(images.astype(np.float64) / 255.0).to(DTYPE).unsqueeze(1)
    y = torch.from_numpy(labels.astype(np.int64))
    return LabeledSet(x, y)


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name}[.gz] not found in {data_dir}")


def default_data_dir() -> Path:
    return Path(os.environ.get("DVSP_MNIST_DIR", "/root/data/mnist"))


def load_mnist(
    data_dir=None, train_size: int = 50_000, test_size: int = 10_000, holdout_start: int = 50_000
) -> SplitDataset:
    """Training split is the first ``train_size`` images of the IDX training file.

    The held-out split is ``test_size`` images starting at ``holdout_start``;
    with the defaults this is the 50,000 / 10,000 partition of the 60,000
    training images.  ``train_size`` below ``holdout_start`` keeps the
    file-order prefix and leaves the held-out part unaffected.
    """
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    full = load_idx(_find(data_dir, MNIST_FILES["train_images"]), _find(data_dir, MNIST_FILES["train_labels"]))
    if train_size > holdout_start or holdout_start + test_size > len(full):
        raise ValueError(
            f"need train_size <= {holdout_start} and {holdout_start} + test_size <= {len(full)} images"
        )
    train = full.subset(slice(0, train_size))
    test = full.subset(slice(holdout_start, holdout_start + test_size))
    return SplitDataset(train, test, n_c=10)


@dataclass(frozen=True)
class Pair:
    a: int
    b: int
    same: bool


def _class_index(labels: torch.Tensor, n_c: int) -> list[list[int]]:
    idx = [[] for _ in range(n_c)]
    for i, y in enumerate(labels.tolist()):
        idx[y].append(i)
    return idx


def make_pairs(
    labels: torch.Tensor, n_c: int, per_class_pair_count: int | None, rng: Rng | None = None
) -> list[Pair]:
    """Genuine / impostor pairs over a labeled set.

    ``per_class_pair_count=None`` enumerates every unordered same-class pair
    and every cross-class pair (lower class first).  Otherwise each unordered
    class pair gets that many impostor pairs and the same total number of
    genuine pairs is spread round-robin over the classes; no pair repeats.
    """
    by_class = _class_index(labels, n_c)
    for c, members in enumerate(by_class):
        if len(members) < 2:
            raise ValueError(f"class {c} has {len(members)} images; need at least 2")

    if per_class_pair_count is None:
        pairs = [Pair(a, b, True) for m in by_class for a, b in itertools.combinations(m, 2)]
        for k, l in itertools.combinations(range(n_c), 2):
            pairs += [Pair(a, b, False) for a in by_class[k] for b in by_class[l]]
        return pairs

    if rng is None:
        raise ValueError("rng required for sampled pairs")
    p = int(per_class_pair_count)
    if p < 1:
        raise ValueError("per_class_pair_count must be >= 1")
    class_pairs = list(itertools.combinations(range(n_c), 2))
    impostor = []
    for k, l in class_pairs:
        impostor += [Pair(a, b, False) for a, b in _sample_distinct(rng, by_class[k], by_class[l], p, False)]
    total = len(impostor)
    quota = [total // n_c + (1 if c < total % n_c else 0) for c in range(n_c)]
    genuine = []
    for c in range(n_c):
        genuine += [Pair(a, b, True) for a, b in _sample_distinct(rng, by_class[c], by_class[c], quota[c], True)]
    return genuine + impostor


def _sample_distinct(rng: Rng, left: list[int], right: list[int], count: int, same: bool):
    if same:
        capacity = len(left) * (len(left) - 1) // 2
    else:
        capacity = len(left) * len(right)
    if count > capacity:
        raise ValueError(f"requested {count} distinct pairs but only {capacity} exist")
    seen: set[tuple[int, int]] = set()
    out = []
    while len(out) < count:
        u = rng.uniform((2,))
        a = left[int(u[0] * len(left))]
        b = right[int(u[1] * len(right))]
        if same:
            if a == b:
                continue
            a, b = min(a, b), max(a, b)
        if (a, b) in seen:
            continue
        seen.add((a, b))
        out.append((a, b))
    return out


@dataclass(frozen=True)
class AttackJob:
    source: int
    target: int
    source_class: int
    target_class: int


def attack_schedule(labels: torch.Tensor, n_c: int, per_class: int, rng: Rng) -> list[AttackJob]:
    """Every ordered class pair (k, l), k != l, crossed over ``per_class`` images of each.

    The same ``per_class`` images of a class serve as sources and as targets,
    so there are ``n_c * (n_c - 1) * per_class**2`` jobs.
    """
    by_class = _class_index(labels, n_c)
    chosen = []
    for c, members in enumerate(by_class):
        if len(members) < per_class:
            raise ValueError(f"class {c} has {len(members)} images; need {per_class}")
        perm = rng.permutation(len(members))[:per_class].tolist()
        chosen.append(sorted(members[i] for i in perm))
    jobs = []
    for k in range(n_c):
        for l in range(n_c):
            if k == l:
                continue
            jobs += [AttackJob(a, b, k, l) for a in chosen[k] for b in chosen[l]]
    return jobs
