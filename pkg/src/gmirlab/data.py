"""Synthetic two-domain classification data, splits and the on-disk format."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

GENERATORS = ("two-moons", "gaussian-clusters")
DOMAIN_TAGS = ("old", "new", "all")
SPLIT_TAGS = ("train", "val", "test", "unsplit")
DEFAULT_SPLIT = (0.6, 0.15, 0.25)
FORMAT_TAG = "#gmirlab-dataset/1"


@dataclass(frozen=True)
class Sample:
    id: int
    features: np.ndarray
    label: int
    domain_tag: str


@dataclass(frozen=True)
class Dataset:
    """Immutable column-store of samples.

    ``domains`` keeps each sample's own origin so a merged ``all`` set can
    still be evaluated per domain.
    """

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    domain_tag: str = "old"
    split_tag: str = "unsplit"
    num_classes: int = 2

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(len(ids), -1) if len(ids) else feats.reshape(0, 0)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        domains = np.asarray(self.domains, dtype="<U3").reshape(-1)
        if not (len(ids) == feats.shape[0] == len(labels) == len(domains)):
            raise ValueError("dataset columns have different lengths")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("sample ids must be unique")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.domain_tag not in DOMAIN_TAGS or self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"bad tags {self.domain_tag!r}/{self.split_tag!r}")
        for name, arr in (("ids", ids), ("features", feats), ("labels", labels), ("domains", domains)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.ids[i]), self.features[i], int(self.labels[i]), str(self.domains[i]))

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def take(self, index: Sequence[int] | np.ndarray, **tags) -> "Dataset":
        """Row subset by positional index (order preserved as given)."""
        index = np.asarray(index, dtype=np.int64)
        return replace(self, ids=self.ids[index], features=self.features[index],
                       labels=self.labels[index], domains=self.domains[index], **tags)

    def select_ids(self, ids: Sequence[int]) -> "Dataset":
        """Subset by sample id, in the order the ids are given."""
        pos = {int(v): i for i, v in enumerate(self.ids)}
        try:
            index = [pos[int(i)] for i in ids]
        except KeyError as exc:
            raise ValueError(f"sample id {exc.args[0]} not in dataset") from None
        return self.take(index)

    def id_set(self) -> set[int]:
        return set(int(i) for i in self.ids)


def empty_like(ds: Dataset) -> Dataset:
    return ds.take(np.arange(0))


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one domain.

    The new domain is the old generator under a rigid shift: rotation about
    the generator's centre, then a translation, then isotropic Gaussian noise
    of standard deviation ``sigma``.
    """

    generator: str = "two-moons"
    size: int = 500
    seed: int = 0
    rotation: float = 0.0
    offset: tuple[float, float] = (0.0, 0.0)
    sigma: float = 0.15
    domain_tag: str = "old"
    id_offset: int = 0
    num_classes: int = 2

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.size < 10:
            raise ValueError("size must be at least 10")
        if self.generator == "two-moons" and self.num_classes != 2:
            raise ValueError("two-moons has exactly two classes")
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))


def _rotate(points: np.ndarray, angle: float, centre: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return (points - centre) @ rot.T + centre


def generate_domain(spec: DomainSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    # interleaved labels give an exactly balanced class split
    labels = np.arange(n) % spec.num_classes
    rng.shuffle(labels)
    if spec.generator == "two-moons":
        t = rng.uniform(0.0, np.pi, size=n)
        upper = np.stack([np.cos(t), np.sin(t)], axis=1)
        lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        clean = np.where(labels[:, None] == 0, upper, lower)
        centre = np.array([0.5, 0.25])
    else:
        angles = 2 * np.pi * np.arange(spec.num_classes) / spec.num_classes
        centres = 1.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        clean = centres[labels]
        centre = np.zeros(2)
    moved = _rotate(clean, spec.rotation, centre) + np.asarray(spec.offset)
    feats = moved + rng.normal(0.0, spec.sigma, size=moved.shape)
    ids = spec.id_offset + np.arange(n)
    return Dataset(ids, feats, labels, np.full(n, spec.domain_tag), domain_tag=spec.domain_tag,
                   split_tag="unsplit", num_classes=spec.num_classes)


def split(dataset: Dataset, ratios: Sequence[float] = DEFAULT_SPLIT, seed: int = 0
          ) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle and cut into train/val/test.

    Sizes are the rounded proportions with the remainder going to test, so
    every part is within one sample of exact.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("split ratios must be three strictly positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios sum to {sum(ratios)}, not 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    cuts = [perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]]
    return tuple(dataset.take(np.sort(c), split_tag=tag)  # type: ignore[return-value]
                 for c, tag in zip(cuts, ("train", "val", "test")))


def merge(a: Dataset, b: Dataset) -> Dataset:
    if len(a) == 0:
        return replace(b, domain_tag="all")
    if len(b) == 0:
        return replace(a, domain_tag="all")
    if a.input_dim != b.input_dim or a.num_classes != b.num_classes:
        raise ValueError("cannot merge datasets with different shapes")
    if a.id_set() & b.id_set():
        raise ValueError("cannot merge datasets with overlapping sample ids")
    split_tag = a.split_tag if a.split_tag == b.split_tag else "unsplit"
    return Dataset(np.concatenate([a.ids, b.ids]), np.concatenate([a.features, b.features]),
                   np.concatenate([a.labels, b.labels]), np.concatenate([a.domains, b.domains]),
                   domain_tag="all", split_tag=split_tag, num_classes=a.num_classes)


def save_dataset(path: str | Path, ds: Dataset) -> None:
    """Write the text format.

    Line 1: ``#gmirlab-dataset/1 input_dim=D num_classes=C domain=T split=S``.
    Then one comma-separated record per sample: ``id,label,domain,x_0,...,x_{D-1}``
    with features printed to 17 significant digits (exact for doubles).
    """
    lines = [f"{FORMAT_TAG} input_dim={ds.input_dim} num_classes={ds.num_classes} "
             f"domain={ds.domain_tag} split={ds.split_tag}"]
    for i in range(len(ds)):
        feats = ",".join(f"{v:.17g}" for v in ds.features[i])
        lines.append(f"{ds.ids[i]},{ds.labels[i]},{ds.domains[i]},{feats}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(FORMAT_TAG):
        raise ValueError(f"{path}: missing gmirlab dataset header")
    header = dict(tok.split("=", 1) for tok in text[0].split()[1:])
    dim = int(header["input_dim"])
    ids, labels, domains, feats = [], [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3 + dim:
            raise ValueError(f"{path}:{lineno}: expected {3 + dim} fields, got {len(parts)}")
        ids.append(int(parts[0]))
        labels.append(int(parts[1]))
        domains.append(parts[2])
        feats.append([float(v) for v in parts[3:]])
    return Dataset(np.array(ids, dtype=np.int64), np.array(feats, dtype=np.float64).reshape(-1, dim),
                   np.array(labels, dtype=np.int64), np.array(domains, dtype="<U3"),
                   domain_tag=header["domain"], split_tag=header["split"],
                   num_classes=int(header["num_classes"]))


@dataclass(frozen=True)
class DomainPair:
    """The six splits of one two-domain task."""

    old_train: Dataset
    old_val: Dataset
    old_test: Dataset
    new_train: Dataset
    new_val: Dataset
    new_test: Dataset
    specs: tuple[DomainSpec, DomainSpec] = field(default=None, compare=False)  # type: ignore[assignment]

    def files(self) -> dict[str, Dataset]:
        return {f"{dom}_{part}": getattr(self, f"{dom}_{part}")
                for dom in ("old", "new") for part in ("train", "val", "test")}


def default_specs(old_size: int = 3631, new_size: int = 3365, seed: int = 0,
                  rotation_deg: float = 30.0, sigma: float = 0.15, sigma_scale: float = 1.5,
                  generator: str = "two-moons") -> tuple[DomainSpec, DomainSpec]:
    old = DomainSpec(generator, old_size, seed, 0.0, (0.0, 0.0), sigma, "old", 0)
    new = DomainSpec(generator, new_size, seed + 1, float(np.deg2rad(rotation_deg)), (0.0, 0.0),
                     sigma * sigma_scale, "new", old_size)
    return old, new


def make_domain_pair(old: DomainSpec, new: DomainSpec, ratios: Sequence[float] = DEFAULT_SPLIT,
                     split_seed: int = 0) -> DomainPair:
    d_old, d_new = generate_domain(old), generate_domain(new)
    if d_old.id_set() & d_new.id_set():
        raise ValueError("old and new domain ids overlap; set distinct id_offset values")
    parts = split(d_old, ratios, split_seed) + split(d_new, ratios, split_seed + 1)
    return DomainPair(*parts, specs=(old, new))
