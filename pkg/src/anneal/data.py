"""Dataset ingestion, synthetic data, canonical pair algebra, initial
training-set construction, and the class-balancing batch sampler.

The on-disk format is a single CSV with header ``id,class,split,f0,...,f{d-1}``.
The ``split`` column is either filled for every row or empty for every row;
empty splits are assigned by a seeded shuffle using the configured fractions.
``#`` starts a comment line.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

SPLITS = ("train", "validation", "test")
PROVENANCES = ("seed", "human", "simulated", "transitive")
ANNOTATED_PROVENANCES = ("seed", "human", "simulated")

SIMILAR = 1
DISSIMILAR = 0


class DatasetError(ValueError):
    """Malformed dataset content; carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One archive item. ``oracle_class`` is ground truth hidden from the
    learner; only the oracle and the evaluator may read it."""

    id: int
    features: np.ndarray
    oracle_class: int
    split: str


class Pair(NamedTuple):
    """Canonically ordered image pair, a < b."""

    a: int
    b: int


def canonicalize(a: int, b: int) -> Pair:
    if a == b:
        raise ValueError(f"a pair needs two distinct images, got ({a}, {b})")
    return Pair(a, b) if a < b else Pair(b, a)


@dataclass(frozen=True)
class LabeledPair:
    pair: Pair
    label: int
    provenance: str

    def __post_init__(self):
        if self.label not in (SIMILAR, DISSIMILAR):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


class LabeledSet:
    """The labeled pair set T. Each canonical Pair appears at most once.

    Annotated labels (seed/human/simulated) always win over transitive ones;
    a transitive label never replaces an existing entry.
    """

    def __init__(self, items: Sequence[LabeledPair] = ()):
        self._items: dict[Pair, LabeledPair] = {}
        for lp in items:
            self.add(lp)

    def add(self, lp: LabeledPair) -> bool:
        """Insert a labeled pair. Returns True if T changed."""
        existing = self._items.get(lp.pair)
        if existing is None:
            self._items[lp.pair] = lp
            return True
        if lp.provenance == "transitive":
            return False
        if existing.provenance == "transitive":
            self._items[lp.pair] = lp
            return True
        return False

    def __contains__(self, pair: Pair) -> bool:
        return pair in self._items

    def __len__(self) -> int:
        return len(self._items)

    def get(self, pair: Pair) -> LabeledPair | None:
        return self._items.get(pair)

    def items(self) -> list[LabeledPair]:
        """All labeled pairs, ordered by canonical pair key."""
        return [self._items[p] for p in sorted(self._items)]

    def pairs(self) -> list[Pair]:
        return sorted(self._items)

    def label_counts(self) -> tuple[int, int]:
        """(dissimilar, similar) counts."""
        n_sim = sum(1 for lp in self._items.values() if lp.label == SIMILAR)
        return len(self._items) - n_sim, n_sim

    def count_provenance(self, provenance: str) -> int:
        return sum(1 for lp in self._items.values()
                   if lp.provenance == provenance)

    def pair_keys(self) -> np.ndarray:
        """Sorted int64 keys (a << 32 | b) for fast membership tests."""
        if not self._items:
            return np.empty(0, dtype=np.int64)
        arr = np.array([(p.a << 32) | p.b for p in self._items],
                       dtype=np.int64)
        arr.sort()
        return arr


class Dataset:
    """Immutable collection of ImageRecords with uniform feature dims."""

    def __init__(self, records: Sequence[ImageRecord]):
        if not records:
            raise DatasetError("dataset is empty")
        seen = set()
        dim = records[0].features.shape[0]
        for r in records:
            if r.id in seen:
                raise DatasetError(f"duplicate image id {r.id}")
            seen.add(r.id)
            if r.features.shape != (dim,):
                raise DatasetError(
                    f"image {r.id} has {r.features.shape[0]} features, "
                    f"expected {dim}")
            if r.split not in SPLITS:
                raise DatasetError(f"image {r.id} has unknown split {r.split!r}")
            if r.oracle_class < 0:
                raise DatasetError(f"image {r.id} has negative class")
        self.records = list(records)
        self.dim = dim
        self.by_id = {r.id: r for r in self.records}
        self._split_ids = {
            s: sorted(r.id for r in self.records if r.split == s)
            for s in SPLITS
        }
        self._id_array: np.ndarray | None = None
        self._feature_matrix: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return len({r.oracle_class for r in self.records})

    def ids(self, split: str) -> list[int]:
        return self._split_ids[split]

    def _ensure_matrix(self) -> None:
        if self._feature_matrix is None:
            ids = np.array(sorted(self.by_id), dtype=np.int64)
            self._id_array = ids
            self._feature_matrix = np.stack(
                [self.by_id[int(i)].features for i in ids])

    def rows_for(self, ids) -> np.ndarray:
        """Feature-matrix row indices for an id array."""
        self._ensure_matrix()
        return np.searchsorted(self._id_array, np.asarray(ids, dtype=np.int64))

    @property
    def feature_matrix(self) -> np.ndarray:
        self._ensure_matrix()
        return self._feature_matrix

    def features_for(self, ids: Sequence[int]) -> np.ndarray:
        self._ensure_matrix()
        return self._feature_matrix[self.rows_for(ids)]

    def classes_for(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self.by_id[i].oracle_class for i in ids], dtype=np.int64)

    def sha256(self) -> str:
        """Content hash over ids, classes, splits and feature bytes."""
        h = hashlib.sha256()
        for r in sorted(self.records, key=lambda r: r.id):
            h.update(f"{r.id},{r.oracle_class},{r.split}".encode())
            h.update(np.ascontiguousarray(r.features, dtype=np.float64).tobytes())
        return h.hexdigest()


def assign_splits(n: int, rng: np.random.Generator,
                  fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
                  ) -> list[str]:
    """Seeded shuffle assignment into train/validation/test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    order = rng.permutation(n)
    splits = [""] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            splits[idx] = "train"
        elif rank < n_train + n_val:
            splits[idx] = "validation"
        else:
            splits[idx] = "test"
    return splits


def load_dataset(path, split_seed: int | None = None,
                 fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
                 ) -> Dataset:
    """Parse the dataset CSV. Blank splits (all rows) are assigned by a
    seeded shuffle; ``split_seed`` is then required."""
    rows: list[tuple[int, int, str, np.ndarray]] = []
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        header: list[str] | None = None
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            if header is None:
                header = cells
                if len(cells) < 4 or cells[:3] != ["id", "class", "split"]:
                    raise DatasetError(
                        "header must start with id,class,split,f0,...", lineno)
                expected = [f"f{i}" for i in range(len(cells) - 3)]
                if cells[3:] != expected:
                    raise DatasetError("feature columns must be f0..f{d-1}", lineno)
                dim = len(cells) - 3
                continue
            if len(cells) != dim + 3:
                raise DatasetError(
                    f"expected {dim + 3} cells, found {len(cells)}", lineno)
            try:
                image_id = int(cells[0])
                oracle_class = int(cells[1])
            except ValueError as exc:
                raise DatasetError(f"bad id/class: {exc}", lineno) from None
            split = cells[2].strip()
            if split and split not in SPLITS:
                raise DatasetError(f"unknown split {split!r}", lineno)
            try:
                features = np.array([float(c) for c in cells[3:]],
                                    dtype=np.float64)
            except ValueError as exc:
                raise DatasetError(f"bad feature value: {exc}", lineno) from None
            if not np.all(np.isfinite(features)):
                raise DatasetError("non-finite feature value", lineno)
            rows.append((image_id, oracle_class, split, features))
    if header is None:
        raise DatasetError("file has no header")
    if not rows:
        raise DatasetError("file has no data rows")

    blank = [split == "" for _, _, split, _ in rows]
    if any(blank) and not all(blank):
        raise DatasetError("split column must be filled for all rows or none")
    if all(blank):
        if split_seed is None:
            raise DatasetError("dataset has no splits and no split seed given")
        assigned = assign_splits(len(rows), np.random.default_rng(split_seed),
                                 fractions)
        rows = [(i, c, s, f) for (i, c, _, f), s in zip(rows, assigned)]
    return Dataset([ImageRecord(i, f, c, s) for i, c, s, f in rows])


def save_dataset_csv(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cols = ",".join(f"f{i}" for i in range(dataset.dim))
        fh.write(f"id,class,split,{cols}\n")
        for r in sorted(dataset.records, key=lambda r: r.id):
            feats = ",".join(repr(float(v)) for v in r.features)
            fh.write(f"{r.id},{r.oracle_class},{r.split},{feats}\n")


def generate_synthetic(classes: int, per_class: int, dim: int,
                       stddev: float, seed: int,
                       fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
                       ) -> Dataset:
    """Gaussian class clusters: unit-stddev centers, per-point noise stddev.

    Fully determined by the seed, including the split assignment.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 10:
        raise ValueError("need at least 10 images per class")
    if dim < 2:
        raise ValueError("need at least 2 feature dimensions")
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    n = classes * per_class
    features = np.repeat(centers, per_class, axis=0)
    features = features + stddev * rng.standard_normal((n, dim))
    oracle_class = np.repeat(np.arange(classes), per_class)
    splits = assign_splits(n, rng, fractions)
    return Dataset([
        ImageRecord(i, features[i], int(oracle_class[i]), splits[i])
        for i in range(n)
    ])


def select_seed_images(dataset: Dataset, fraction: float,
                       rng: np.random.Generator) -> list[int]:
    """The randomly chosen images that anchor the initial labeled set."""
    train_ids = dataset.ids("train")
    n_seeds = math.ceil(fraction * len(train_ids))
    chosen = rng.choice(np.array(train_ids), size=n_seeds, replace=False)
    return [int(i) for i in chosen]


def build_initial_set(dataset: Dataset, seed_fraction: float,
                      per_seed_similar: int, per_seed_dissimilar: int,
                      rng: np.random.Generator
                      ) -> tuple[LabeledSet, list[int]]:
    """For each seed image, label a few same-class partners similar and a few
    other-class partners dissimilar. Duplicate canonical pairs collapse.

    Returns (T0, seed image ids).
    """
    train_ids = dataset.ids("train")
    by_class: dict[int, list[int]] = {}
    for i in train_ids:
        by_class.setdefault(dataset.by_id[i].oracle_class, []).append(i)
    seeds = select_seed_images(dataset, seed_fraction, rng)
    labeled = LabeledSet()
    for seed_id in seeds:
        cls = dataset.by_id[seed_id].oracle_class
        same = [i for i in by_class[cls] if i != seed_id]
        other = [i for i in train_ids
                 if dataset.by_id[i].oracle_class != cls]
        if len(same) < per_seed_similar:
            raise DatasetError(
                f"class {cls} has only {len(same)} possible similar partners "
                f"for image {seed_id}, need {per_seed_similar}")
        if len(other) < per_seed_dissimilar:
            raise DatasetError(
                f"not enough cross-class partners for image {seed_id} "
                f"(class {cls})")
        if per_seed_similar > 0:
            for partner in rng.choice(np.array(same), size=per_seed_similar,
                                      replace=False):
                labeled.add(LabeledPair(canonicalize(seed_id, int(partner)),
                                        SIMILAR, "seed"))
        if per_seed_dissimilar > 0:
            for partner in rng.choice(np.array(other),
                                      size=per_seed_dissimilar, replace=False):
                labeled.add(LabeledPair(canonicalize(seed_id, int(partner)),
                                        DISSIMILAR, "seed"))
    return labeled, seeds


def oversample_epoch(labeled: Sequence[LabeledPair],
                     rng: np.random.Generator) -> list[LabeledPair]:
    """One epoch worth of pairs: every majority pair once, the minority
    resampled with replacement up to the majority count, shuffled."""
    similar = [lp for lp in labeled if lp.label == SIMILAR]
    dissimilar = [lp for lp in labeled if lp.label == DISSIMILAR]
    if not similar or not dissimilar:
        warnings.warn("training set has a single label; skipping oversampling",
                      RuntimeWarning, stacklevel=2)
        epoch = list(labeled)
    elif len(similar) == len(dissimilar):
        epoch = list(labeled)
    else:
        majority, minority = ((dissimilar, similar)
                              if len(dissimilar) > len(similar)
                              else (similar, dissimilar))
        picks = rng.integers(0, len(minority), size=len(majority))
        epoch = majority + [minority[i] for i in picks]
    order = rng.permutation(len(epoch))
    return [epoch[i] for i in order]


def oversample_batches(labeled: Sequence[LabeledPair], batch_size: int,
                       rng: np.random.Generator
                       ) -> Iterator[list[LabeledPair]]:
    """Stream one epoch of class-balanced batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    epoch = oversample_epoch(labeled, rng)
    for start in range(0, len(epoch), batch_size):
        yield epoch[start:start + batch_size]
