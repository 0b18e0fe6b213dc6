"""Dataset generation, IDX ingestion, and deterministic splitting.

The synthetic generator places class means on the unit sphere with a
minimum pairwise angle and scatters isotropic Gaussian instances around
them, which gives controlled geometry for open-space experiments. IDX is
the only external image format; pixels rescale to [0, 1] on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CACHE_FORMAT = "dataset-cache/1"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class WrongMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    """Immutable instance matrix with contiguous 0-based labels."""

    instances: np.ndarray
    labels: np.ndarray
    name: str
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.instances.shape[0] != self.labels.shape[0]:
            raise ValueError("instances and labels disagree on length")
        classes = np.unique(self.labels)
        if classes.size and not np.array_equal(classes, np.arange(classes.size)):
            raise ValueError("labels must form a contiguous 0-based range")
        counts = np.bincount(self.labels, minlength=classes.size)
        if classes.size and counts.min() <= 0:
            raise ValueError("every class needs at least one instance")
        self.instances.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def of_classes(self, classes) -> tuple[np.ndarray, np.ndarray]:
        mask = np.isin(self.labels, np.asarray(list(classes)))
        return self.instances[mask], self.labels[mask]


def gen_gaussian_sphere(
    classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    min_angle_deg: float = 25.0,
    max_attempts: int = 20_000,
) -> Dataset:
    """Gaussian blobs around unit-sphere means with a pairwise angle floor."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    cos_ceiling = np.cos(np.radians(min_angle_deg))
    means: list[np.ndarray] = []
    attempts = 0
    rejections = 0
    while len(means) < classes:
        if attempts >= max_attempts:
            raise ValueError(
                f"could not place {classes} means with pairwise angle >= {min_angle_deg} deg "
                f"in {dim} dims after {max_attempts} draws"
            )
        attempts += 1
        candidate = rng.standard_normal(dim)
        candidate /= np.linalg.norm(candidate)
        if any(np.dot(candidate, m) > cos_ceiling for m in means):
            rejections += 1
            continue
        means.append(candidate)
    instances = np.concatenate(
        [m[None, :] + spread * rng.standard_normal((per_class, dim)) for m in means], axis=0
    )
    labels = np.repeat(np.arange(classes), per_class)
    min_pair_cos = max(
        (float(np.dot(a, b)) for i, a in enumerate(means) for b in means[i + 1 :]),
        default=-1.0,
    )
    meta = {
        "kind": "gaussian_sphere",
        "spread": spread,
        "min_angle_deg": min_angle_deg,
        "rejections": rejections,
        "min_pairwise_angle_deg": float(np.degrees(np.arccos(np.clip(min_pair_cos, -1, 1)))),
    }
    return Dataset(instances, labels, name=f"sphere{classes}x{per_class}d{dim}", seed=seed, meta=meta)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedPayloadError(f"{what}: expected {count} bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load the big-endian IDX image/label pair used by MNIST-scale data."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise WrongMagicError(f"image magic 0x{magic:08x} != 0x{IDX_IMAGES_MAGIC:08x}")
        pixels = np.frombuffer(_read_exact(fh, count * rows * cols, "image payload"), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise WrongMagicError(f"label magic 0x{magic:08x} != 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, label_count, "label payload"), dtype=np.uint8)
    if count != label_count:
        raise CountMismatchError(f"{count} images vs {label_count} labels")
    instances = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(
        instances,
        labels.astype(np.int64),
        name="idx",
        meta={"kind": "idx", "rows": int(rows), "cols": int(cols)},
    )


def split(dataset: Dataset, fractions, seed: int) -> list[Dataset]:
    """Stratified partition; per-class shares follow the largest-remainder rule."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    parts = len(fractions)
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(parts)]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < parts:
            raise ValueError(f"class {c} has {idx.size} instances, cannot stratify into {parts} parts")
        idx = rng.permutation(idx)
        quota = np.array([f * idx.size for f in fractions])
        counts = np.floor(quota).astype(int)
        remainder = idx.size - counts.sum()
        order = np.argsort(-(quota - counts), kind="stable")
        for k in order[:remainder]:
            counts[k] += 1
        if (counts == 0).any():
            raise ValueError(f"class {c} is too small for fractions {fractions}")
        start = 0
        for part, n in enumerate(counts):
            buckets[part].extend(idx[start : start + n].tolist())
            start += n
    out = []
    for part, rows in enumerate(buckets):
        rows = np.sort(np.asarray(rows, dtype=np.intp))
        out.append(
            Dataset(
                dataset.instances[rows],
                dataset.labels[rows],
                name=f"{dataset.name}/part{part}",
                seed=seed,
                meta=dict(dataset.meta),
            )
        )
    return out


def save_cache(dataset: Dataset, path) -> None:
    np.savez(
        path,
        format=CACHE_FORMAT,
        instances=dataset.instances,
        labels=dataset.labels,
        name=dataset.name,
        seed=-1 if dataset.seed is None else dataset.seed,
    )


def load_cache(path) -> Dataset:
    payload = np.load(path, allow_pickle=False)
    if str(payload["format"]) != CACHE_FORMAT:
        raise ValueError(f"unsupported cache format {payload['format']!r}")
    seed = int(payload["seed"])
    return Dataset(
        payload["instances"],
        payload["labels"],
        name=str(payload["name"]),
        seed=None if seed < 0 else seed,
    )
