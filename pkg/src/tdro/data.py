"""Interaction datasets: loading, validation, chronological splitting.

File formats (UTF-8 text, no headers):

* interactions file: one interaction per line, ``user_id<TAB>item_id<TAB>timestamp``
* features file: one item per line, ``item_id<TAB>v1,v2,...,vd`` with decimal
  floats; every row has the same dimension and item ids are the contiguous
  range ``0..num_items-1``

Worked example (3 users, 2 items, one feature dimension pair)::

    interactions.tsv          features.tsv
    0<TAB>0<TAB>100           0<TAB>0.5,-1.0
    1<TAB>1<TAB>105           1<TAB>0.25,2.0
    2<TAB>0<TAB>101
    0<TAB>1<TAB>99
    1<TAB>0<TAB>99

Interactions are implicit positives (label 1); negatives are sampled at
training time.
"""

from dataclasses import dataclass, field

import numpy as np

from .seeding import named_rng


class ParseError(ValueError):
    """A line in an input file could not be parsed."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class IntegrityError(ValueError):
    """The files parsed but violate a dataset consistency requirement."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int
    label: int = 1


@dataclass
class Dataset:
    """Implicit-feedback interactions plus dense item features.

    ``users``, ``items`` and ``timestamps`` are parallel arrays sorted by
    (timestamp, original input order); ``features[i]`` is the feature row of
    item ``i``.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    features: np.ndarray
    num_users: int
    num_items: int

    def __post_init__(self):
        for arr in (self.users, self.items, self.timestamps, self.features):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.users)

    @property
    def d_feat(self):
        return self.features.shape[1]

    def interaction(self, idx: int) -> Interaction:
        return Interaction(int(self.users[idx]), int(self.items[idx]),
                           int(self.timestamps[idx]))


@dataclass
class SplitDataset:
    """Train/valid/test partition of a dataset with its warm/cold item sets.

    Index arrays refer to positions in the sorted interaction list and are
    ascending, so each part is chronologically ordered. ``warm_items`` are the
    items appearing in train; ``cold_items`` appear in valid or test only.
    """

    data: Dataset
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray
    warm_items: np.ndarray
    cold_items: np.ndarray
    warm_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.train_idx, self.valid_idx, self.test_idx,
                    self.warm_items, self.cold_items, self.warm_mask):
            arr.setflags(write=False)


def _parse_features(path):
    rows = {}
    d_feat = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, line_no,
                                 f"expected 'item_id<TAB>values', got {line!r}")
            try:
                item_id = int(parts[0])
                values = [float(v) for v in parts[1].split(",")]
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if item_id < 0:
                raise ParseError(path, line_no, f"negative item id {item_id}")
            if d_feat is None:
                d_feat = len(values)
            elif len(values) != d_feat:
                raise ParseError(
                    path, line_no,
                    f"feature dimension {len(values)} != {d_feat} of first row")
            if item_id in rows:
                raise IntegrityError(f"duplicate feature row for item {item_id}")
            rows[item_id] = values

    if not rows:
        raise IntegrityError("empty feature file")
    num_items = max(rows) + 1
    missing = [i for i in range(num_items) if i not in rows]
    if missing:
        raise IntegrityError(
            f"feature item ids must be contiguous from 0; missing {missing[:5]}")
    matrix = np.array([rows[i] for i in range(num_items)], dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        bad = int(np.argwhere(~np.isfinite(matrix).all(axis=1))[0][0])
        raise IntegrityError(f"non-finite feature value for item {bad}")
    return matrix


def _parse_interactions(path):
    users, items, stamps = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    path, line_no,
                    f"expected 'user<TAB>item<TAB>timestamp', got {line!r}")
            try:
                u, i, t = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if u < 0 or i < 0:
                raise ParseError(path, line_no, "negative user or item id")
            if t < 0:
                raise ParseError(path, line_no, f"negative timestamp {t}")
            users.append(u)
            items.append(i)
            stamps.append(t)
    return users, items, stamps


def load_dataset(interactions_path, features_path) -> Dataset:
    """Load and validate a dataset from the two text files.

    Interactions come back sorted by (timestamp, input order). Raises
    :class:`ParseError` for malformed lines and :class:`IntegrityError` for
    consistency violations (missing feature rows, non-finite features,
    empty dataset).
    """
    features = _parse_features(features_path)
    users, items, stamps = _parse_interactions(interactions_path)
    if not users:
        raise IntegrityError("empty dataset")

    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    stamps = np.asarray(stamps, dtype=np.int64)

    num_items = features.shape[0]
    if items.max() >= num_items:
        bad = int(items[items >= num_items][0])
        raise IntegrityError(f"item {bad} has interactions but no feature row")

    order = np.argsort(stamps, kind="stable")
    return Dataset(
        users=users[order],
        items=items[order],
        timestamps=stamps[order],
        features=features,
        num_users=int(users.max()) + 1,
        num_items=num_items,
    )


def chronological_split(dataset: Dataset, ratios=(0.8, 0.1, 0.1), *,
                        mode="chronological", seed=0) -> SplitDataset:
    """Split interactions into train/valid/test parts.

    Default is the chronological split: the earliest ``ratios[0]`` fraction of
    the sorted interactions is train, the next ``ratios[1]`` valid, the rest
    test. ``mode="random"`` applies the same proportions to a seeded random
    permutation instead (for data without meaningful global timestamps).
    """
    n = len(dataset)
    if n == 0:
        raise IntegrityError("empty dataset")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three non-negative reals, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    n_train = int(np.floor(ratios[0] * n))
    n_valid = int(np.floor(ratios[1] * n))
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) == 0:
        raise ValueError("degenerate split")

    if mode == "chronological":
        order = np.arange(n)
    elif mode == "random":
        order = named_rng(seed, "split").permutation(n)
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    train_idx = np.sort(order[:n_train])
    valid_idx = np.sort(order[n_train:n_train + n_valid])
    test_idx = np.sort(order[n_train + n_valid:])

    warm_items = np.unique(dataset.items[train_idx])
    eval_items = np.unique(
        np.concatenate([dataset.items[valid_idx], dataset.items[test_idx]]))
    cold_items = np.setdiff1d(eval_items, warm_items, assume_unique=True)
    warm_mask = np.zeros(dataset.num_items, dtype=bool)
    warm_mask[warm_items] = True

    return SplitDataset(
        data=dataset,
        train_idx=train_idx,
        valid_idx=valid_idx,
        test_idx=test_idx,
        warm_items=warm_items,
        cold_items=cold_items,
        warm_mask=warm_mask,
    )


def write_interactions(path, users, items, timestamps):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, t in zip(users, items, timestamps):
            fh.write(f"{int(u)}\t{int(i)}\t{int(t)}\n")


def write_features(path, features):
    with open(path, "w", encoding="utf-8") as fh:
        for item_id, row in enumerate(features):
            values = ",".join(repr(float(v)) for v in row)
            fh.write(f"{item_id}\t{values}\n")
