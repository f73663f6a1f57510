"""Dataset loading, reduced-subset construction, and synthetic shape data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """A dataset file does not match the expected binary layout."""


@dataclass
class Dataset:
    images: np.ndarray  # (N,C,H,W) float32 in [0,1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image/label count mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)


def load_cifar_binary(path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read a CIFAR binary file: per record 1 label byte (+1 coarse byte for
    the 100-class variant) followed by 3072 channel-major pixel bytes."""
    raw = np.fromfile(path, dtype=np.uint8)
    record = (2 if num_classes == 100 else 1) + 3072
    if raw.size % record != 0:
        offset = (raw.size // record) * record
        raise FormatError(
            f"{path}: size {raw.size} is not a multiple of record length {record}"
            f" (trailing bytes start at offset {offset})"
        )
    raw = raw.reshape(-1, record)
    label_col = 1 if num_classes == 100 else 0
    labels = raw[:, label_col].astype(np.int64)
    images = raw[:, record - 3072 :].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, num_classes, split)


def make_reduced(dataset: Dataset, train_size: int, val_size: int, seed: int):
    """Class-stratified disjoint (train, val) subsets, deterministic per seed."""
    n = len(dataset)
    if train_size + val_size > n:
        raise ValueError(f"requested {train_size}+{val_size} samples from {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    labels = dataset.labels[order]

    def stratified_take(pool, size):
        taken = []
        c = dataset.num_classes
        base, extra = divmod(size, c)
        # per-class quota, off-by-at-most-one from exact proportionality
        for ci in range(c):
            quota = base + (1 if ci < extra else 0)
            members = [i for i in pool if labels[i] == ci]
            taken.extend(members[:quota])
        short = size - len(taken)
        if short > 0:
            rest = [i for i in pool if i not in set(taken)]
            taken.extend(rest[:short])
        return taken

    pool = list(range(n))
    tr = stratified_take(pool, train_size)
    tr_set = set(tr)
    pool = [i for i in pool if i not in tr_set]
    va = stratified_take(pool, val_size)
    train = dataset.subset(order[np.array(tr)], "train")
    val = dataset.subset(order[np.array(va)], "val")
    return train, val


def synth_shapes(n: int, classes: int, size: int = 32, seed: int = 0,
                 noise: float = 0.15) -> Dataset:
    """Procedurally rendered class-distinct shapes on noisy color backgrounds.

    Classes cycle through: horizontal bar, vertical bar, disk, cross,
    diagonal bar, ring, two dots, triangle, checker, frame.
    """
    if not 2 <= classes <= 10:
        raise ValueError(f"classes must be in 2..10, got {classes}")
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 3, size, size), dtype=np.float32)
    labels = np.arange(n) % classes
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")

    for i in range(n):
        cls = labels[i]
        cy = size / 2 + rng.uniform(-size / 6, size / 6)
        cx = size / 2 + rng.uniform(-size / 6, size / 6)
        r = size * rng.uniform(0.18, 0.30)
        th = max(1.5, size * 0.07)
        dy, dx = ys - cy, xs - cx

        if cls == 0:
            mask = (np.abs(dy) < th) & (np.abs(dx) < r)
        elif cls == 1:
            mask = (np.abs(dx) < th) & (np.abs(dy) < r)
        elif cls == 2:
            mask = dy * dy + dx * dx < r * r
        elif cls == 3:
            mask = ((np.abs(dy) < th) | (np.abs(dx) < th)) & (np.abs(dy) < r) & (np.abs(dx) < r)
        elif cls == 4:
            mask = (np.abs(dy - dx) < th * 1.4) & (np.abs(dy) < r) & (np.abs(dx) < r)
        elif cls == 5:
            rad = np.sqrt(dy * dy + dx * dx)
            mask = (rad < r) & (rad > r - 2 * th)
        elif cls == 6:
            off = r * 0.6
            mask = ((dy - off) ** 2 + dx * dx < th * th * 4) | ((dy + off) ** 2 + dx * dx < th * th * 4)
        elif cls == 7:
            mask = (dy > -r) & (dy < r) & (np.abs(dx) < (dy + r) / 2)
        elif cls == 8:
            period = max(2, int(r / 2))
            mask = (((ys // period) + (xs // period)) % 2 == 0) & (np.abs(dy) < r) & (np.abs(dx) < r)
        else:
            mask = (np.abs(dy) < r) & (np.abs(dx) < r) & ~((np.abs(dy) < r - 2 * th) & (np.abs(dx) < r - 2 * th))

        bg = rng.uniform(0.0, 0.35, size=3)
        fg = rng.uniform(0.55, 1.0, size=3)
        img = np.empty((3, size, size), dtype=np.float32)
        for c in range(3):
            img[c] = np.where(mask, fg[c], bg[c])
        img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)

    return Dataset(images, labels.astype(np.int64), classes, "train")
