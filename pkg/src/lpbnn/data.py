"""Synthetic desk-scale datasets: in-distribution, noise-corrupted and shifted OOD splits."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .config import DatasetSpec


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class Datasets:
    train: Split
    test: Split
    ood: Split
    corrupted: dict[int, Split] = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.train.x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.train.y.max(), self.test.y.max())) + 1


def blob_centers(spec: DatasetSpec, seed: int) -> np.ndarray:
    rng = make_rng(seed, "data", "centers")
    C, D = spec.n_classes, spec.input_dim
    if D == 1:
        return (np.arange(C) - (C - 1) / 2.0)[:, None] * spec.center_spread
    # evenly spread on a circle in a random plane, so class gaps are uniform
    basis, _ = np.linalg.qr(rng.standard_normal((D, 2)))
    angles = 2.0 * np.pi * np.arange(C) / C
    return spec.center_spread * (np.cos(angles)[:, None] * basis[:, 0] + np.sin(angles)[:, None] * basis[:, 1])


def ood_direction(spec: DatasetSpec, seed: int) -> np.ndarray:
    d = make_rng(seed, "data", "ood_direction").standard_normal(spec.input_dim)
    return d / np.linalg.norm(d)


def _sample(spec: DatasetSpec, n: int, rng: np.random.Generator, centers: np.ndarray) -> Split:
    C, D = spec.n_classes, spec.input_dim
    y = np.arange(n) % C
    y = y[rng.permutation(n)]
    if spec.kind == "blobs":
        x = centers[y] + spec.class_std * rng.standard_normal((n, D))
    else:
        radius = spec.center_spread * (y + 1.0) + spec.class_std * 0.25 * rng.standard_normal(n)
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        x = spec.class_std * 0.25 * rng.standard_normal((n, D))
        x[:, 0] = radius * np.cos(theta)
        x[:, 1] = radius * np.sin(theta)
    return Split(x, y.astype(np.int64))


def generate_dataset(spec: DatasetSpec, seed: int) -> Datasets:
    """Train/test/OOD/corrupted splits fully determined by ``(spec, seed)``.

    The OOD split is the test generator displaced by ``ood_shift`` along a
    seeded unit direction; corrupted splits add i.i.d. Gaussian noise of the
    per-severity std to the test inputs.
    """
    spec.validate()
    if spec.kind == "file":
        return load_dataset_dir(spec.path)
    centers = blob_centers(spec, seed)
    train = _sample(spec, spec.n_train, make_rng(seed, "data", "train"), centers)
    test = _sample(spec, spec.n_test, make_rng(seed, "data", "test"), centers)
    ood_src = _sample(spec, spec.n_test, make_rng(seed, "data", "ood"), centers)
    ood = Split(ood_src.x + spec.ood_shift * ood_direction(spec, seed), None)
    corrupted = {}
    for sev, std in zip(spec.corruption_severities, spec.corruption_noise):
        if std == 0:
            corrupted[sev] = Split(test.x.copy(), test.y.copy())
        else:
            noise = make_rng(seed, "data", "corrupt", sev).standard_normal(test.x.shape)
            corrupted[sev] = Split(test.x + std * noise, test.y.copy())
    return Datasets(train, test, ood, corrupted)


# ---------------------------------------------------------------- CSV files


def write_split(path, split: Split) -> None:
    D = split.x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{k}" for k in range(D)] + ["label"])
        for n in range(len(split)):
            label = "" if split.y is None else int(split.y[n])
            w.writerow([repr(float(v)) for v in split.x[n]] + [label])


def read_split(path) -> Split:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label" or any(
            h != f"x_{k}" for k, h in enumerate(header[:-1])
        ):
            raise ValueError(f"{path}: header must be x_0,...,x_{{D-1}},label")
        rows = [r for r in reader if r]
    x = np.array([[float(v) for v in r[:-1]] for r in rows]).reshape(len(rows), len(header) - 1)
    labels = [r[-1] for r in rows]
    y = None if any(l == "" for l in labels) else np.array([int(l) for l in labels], dtype=np.int64)
    return Split(x, y)


def write_dataset_dir(out_dir, data: Datasets) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_split(out / "train.csv", data.train)
    write_split(out / "test.csv", data.test)
    write_split(out / "ood.csv", data.ood)
    for sev, split in sorted(data.corrupted.items()):
        write_split(out / f"corrupt_{sev}.csv", split)
    return out


_CORRUPT = re.compile(r"corrupt_(\d+)\.csv$")


def load_dataset_dir(path) -> Datasets:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    for name in ("train.csv", "test.csv"):
        if not (root / name).is_file():
            raise FileNotFoundError(f"dataset directory {root} lacks {name}")
    ood_path = root / "ood.csv"
    ood = read_split(ood_path) if ood_path.is_file() else Split(np.zeros((0, 0)))
    corrupted = {}
    for f in sorted(root.iterdir()):
        m = _CORRUPT.match(f.name)
        if m:
            corrupted[int(m.group(1))] = read_split(f)
    return Datasets(read_split(root / "train.csv"), read_split(root / "test.csv"), ood,
                    dict(sorted(corrupted.items())))
