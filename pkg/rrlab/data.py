"""Synthetic datasets and CSV feature files.

CSV layout: header ``f0,...,f{d-1},label`` then one row per sample. A sibling
``<file>.meta.json`` records the generator name, its parameters and seed.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rrlab.artifacts import atomic_write_text, write_json
from rrlab.errors import InvalidArgumentError, ParseError, SplitError
from rrlab.seeding import rng_for

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = "custom"
    seed: int | None = None
    params: dict = field(default_factory=dict)
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise InvalidArgumentError(f"X must be a non-empty (n, d) matrix, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise InvalidArgumentError(f"y has shape {self.y.shape}, expected ({self.X.shape[0]},)")
        if self.n_classes < 2:
            raise InvalidArgumentError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise InvalidArgumentError(f"labels must lie in [0, {self.n_classes})")
        if not np.isfinite(self.X).all():
            raise InvalidArgumentError("X must be finite")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, index: np.ndarray, suffix: str) -> "Dataset":
        return Dataset(
            X=self.X[index],
            y=self.y[index],
            n_classes=self.n_classes,
            name=f"{self.name}-{suffix}",
            seed=self.seed,
            params=self.params,
            bounds=self.bounds,
        )

    def metadata(self) -> dict:
        return {
            "generator": self.name,
            "params": self.params,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "bounds": list(self.bounds) if self.bounds else None,
        }


def class_means(n_classes: int, dim: int, separation: float) -> np.ndarray:
    """Means with pairwise distance ``separation``.

    With n_classes <= dim the means are scaled basis vectors (a regular
    simplex). Otherwise they sit evenly on a circle in the first two axes with
    adjacent means ``separation`` apart.
    """
    means = np.zeros((n_classes, dim))
    if n_classes <= dim:
        means[np.arange(n_classes), np.arange(n_classes)] = separation / math.sqrt(2)
    else:
        radius = separation / (2 * math.sin(math.pi / n_classes))
        angles = 2 * math.pi * np.arange(n_classes) / n_classes
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means


def gen_blobs(n_classes: int, dim: int, n_per_class: int, separation: float, noise_sd: float, seed: int) -> Dataset:
    if n_classes < 2 or dim < 2 or n_per_class < 1:
        raise InvalidArgumentError(
            f"blobs need n_classes >= 2, dim >= 2, n_per_class >= 1; got {n_classes}, {dim}, {n_per_class}"
        )
    if not separation > 0 or noise_sd < 0:
        raise InvalidArgumentError(f"blobs need separation > 0 and noise_sd >= 0, got {separation}, {noise_sd}")
    rng = rng_for(seed, "blobs")
    means = class_means(n_classes, dim, separation)
    y = np.repeat(np.arange(n_classes), n_per_class)
    X = means[y] + noise_sd * rng.standard_normal((len(y), dim))
    order = rng.permutation(len(y))
    params = {"n_classes": n_classes, "dim": dim, "n_per_class": n_per_class,
              "separation": separation, "noise_sd": noise_sd}
    return Dataset(X[order], y[order], n_classes, name="blobs", seed=seed, params=params)


def _balanced_counts(n: int, n_classes: int) -> list[int]:
    return [n // n_classes + (1 if c < n % n_classes else 0) for c in range(n_classes)]


def gen_moons(n: int, noise_sd: float, seed: int) -> Dataset:
    """Two interleaved half circles, the upper one labelled 0."""
    if n < 2 or noise_sd < 0:
        raise InvalidArgumentError(f"moons need n >= 2 and noise_sd >= 0, got {n}, {noise_sd}")
    rng = rng_for(seed, "moons")
    n_outer, n_inner = _balanced_counts(n, 2)
    t_outer = np.linspace(0, math.pi, n_outer)
    t_inner = np.linspace(0, math.pi, n_inner)
    outer = np.column_stack([np.cos(t_outer), np.sin(t_outer)])
    inner = np.column_stack([1 - np.cos(t_inner), 1 - np.sin(t_inner) - 0.5])
    X = np.vstack([outer, inner]) + noise_sd * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(X[order], y[order], 2, name="moons", seed=seed, params={"n": n, "noise_sd": noise_sd})


def gen_rings(n: int, n_classes: int, noise_sd: float, seed: int) -> Dataset:
    """Concentric circles in the plane; class c has radius c + 1."""
    if n < 2 or n_classes < 2 or n < n_classes or noise_sd < 0:
        raise InvalidArgumentError(
            f"rings need n >= n_classes >= 2 and noise_sd >= 0, got {n}, {n_classes}, {noise_sd}"
        )
    rng = rng_for(seed, "rings")
    y = np.concatenate([np.full(k, c, dtype=np.int64) for c, k in enumerate(_balanced_counts(n, n_classes))])
    angles = rng.uniform(0, 2 * math.pi, size=n)
    radii = (y + 1).astype(np.float64)
    X = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    X += noise_sd * rng.standard_normal((n, 2))
    order = rng.permutation(n)
    params = {"n": n, "n_classes": n_classes, "noise_sd": noise_sd}
    return Dataset(X[order], y[order], n_classes, name="rings", seed=seed, params=params)


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified seeded split; ``fraction`` of every class goes to the first part."""
    if not 0 < fraction < 1:
        raise InvalidArgumentError(f"split fraction must be in (0, 1), got {fraction}")
    rng = rng_for(seed, "split")
    first, second = [], []
    for c in range(dataset.n_classes):
        members = np.flatnonzero(dataset.y == c)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise SplitError(f"class {c} has {len(members)} sample(s); need at least 2 to split")
        members = rng.permutation(members)
        k = min(max(int(round(fraction * len(members))), 1), len(members) - 1)
        first.append(members[:k])
        second.append(members[k:])
    first_idx = np.sort(np.concatenate(first))
    second_idx = np.sort(np.concatenate(second))
    return dataset.subset(first_idx, "train"), dataset.subset(second_idx, "test")


def meta_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save_csv(dataset: Dataset, path: Path):
    path = Path(path)
    header = [f"f{i}" for i in range(dataset.dim)] + ["label"]
    lines = [",".join(header)]
    for row, label in zip(dataset.X, dataset.y):
        lines.append(",".join(format(v, ".17g") for v in row) + f",{label}")
    atomic_write_text(path, "\n".join(lines) + "\n")
    write_json(meta_path(path), dataset.metadata())
    log.info("Wrote %d rows to %s", len(dataset), path)


def load_csv(path: Path, n_classes: int | None = None) -> Dataset:
    """Read a feature CSV.

    The class count comes from ``n_classes``, else the metadata sidecar, else
    max label + 1.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: empty file", 1)
    header = [h.strip() for h in lines[0].split(",")]
    if len(header) < 2 or header[-1] != "label":
        raise ParseError(f"{path}:1: header must end with a label column", 1)
    expected = [f"f{i}" for i in range(len(header) - 1)]
    if header[:-1] != expected:
        raise ParseError(f"{path}:1: feature columns must be named f0..f{len(header) - 2}", 1)

    meta = {}
    sidecar = meta_path(path)
    if sidecar.is_file():
        try:
            meta = json.loads(sidecar.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ParseError(f"{sidecar}: unreadable metadata sidecar: {e}") from None
        if not isinstance(meta, dict):
            raise ParseError(f"{sidecar}: metadata sidecar must hold a JSON object")
    else:
        log.warning("No metadata sidecar for %s", path)
    if n_classes is None:
        n_classes = meta.get("n_classes")

    rows, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(cells)}", lineno)
        try:
            rows.append([float(c) for c in cells[:-1]])
            labels.append(int(cells[-1]))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric cell", lineno) from None
        if not all(math.isfinite(v) for v in rows[-1]):
            raise ParseError(f"{path}:{lineno}: non-finite feature", lineno)
        if labels[-1] < 0 or (n_classes is not None and labels[-1] >= n_classes):
            raise ParseError(f"{path}:{lineno}: label {labels[-1]} outside [0, {n_classes})", lineno)
    if not rows:
        raise ParseError(f"{path}: no data rows", len(lines))

    y = np.array(labels, dtype=np.int64)
    bounds = meta.get("bounds")
    return Dataset(
        X=np.array(rows, dtype=np.float64),
        y=y,
        n_classes=n_classes if n_classes is not None else max(int(y.max()) + 1, 2),
        name=meta.get("generator", path.stem),
        seed=meta.get("seed"),
        params=meta.get("params", {}),
        bounds=tuple(bounds) if bounds else None,
    )


def from_config(cfg) -> Dataset:
    """Generate or load the dataset described by a DataConfig."""
    if cfg.kind == "blobs":
        return gen_blobs(cfg.n_classes, cfg.dim, cfg.n_per_class, cfg.separation, cfg.noise, cfg.seed)
    if cfg.kind == "moons":
        return gen_moons(cfg.n, cfg.noise, cfg.seed)
    if cfg.kind == "rings":
        return gen_rings(cfg.n, cfg.n_classes, cfg.noise, cfg.seed)
    return load_csv(Path(cfg.path))
