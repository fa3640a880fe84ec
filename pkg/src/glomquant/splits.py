"""Patient-grouped five-fold cross-validation and label-fraction subsampling."""

import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InsufficientGroupsError

N_FOLDS = 5
TRAIN_SHARE = 0.75
LABEL_FRACTIONS = (0.01, 0.05, 0.10, 0.25, 1.0)


@dataclass(frozen=True)
class Fold:
    train: tuple
    val: tuple
    test: tuple


@dataclass
class FoldPlan:
    seed: int
    folds: list

    @property
    def test_sets(self):
        return [f.test for f in self.folds]

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "folds": [
                {"test": list(f.test), "train": list(f.train), "val": list(f.val)}
                for f in self.folds
            ],
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text) -> "FoldPlan":
        data = json.loads(text)
        folds = [Fold(tuple(f["train"]), tuple(f["val"]), tuple(f["test"])) for f in data["folds"]]
        return cls(int(data["seed"]), folds)


def make_folds(patient_ids, seed=0, n_folds=N_FOLDS) -> FoldPlan:
    """Shuffle patients, cut ``n_folds`` near-equal test chunks, split the rest 75/25.

    The train share is rounded up, so 4 remaining patients give 3 train
    and 1 validation.
    """
    patients = sorted(set(patient_ids))
    if len(patients) < n_folds:
        raise InsufficientGroupsError(
            f"need at least {n_folds} distinct patients, got {len(patients)}"
        )
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    chunks = [list(c) for c in np.array_split(np.array(order, dtype=object), n_folds)]
    folds = []
    for i, test in enumerate(chunks):
        rest = [p for j, c in enumerate(chunks) if j != i for p in c]
        n_train = math.ceil(TRAIN_SHARE * len(rest))
        folds.append(Fold(tuple(rest[:n_train]), tuple(rest[n_train:]), tuple(test)))
    return FoldPlan(int(seed), folds)


def _rank_key(seed, item_id):
    return hashlib.sha256(f"{seed}:{item_id}".encode()).hexdigest()


@dataclass
class Subset:
    items: list
    per_class: dict
    missing_classes: list = field(default_factory=list)


def subsample_fraction(train_set, f, seed=0, classes=None) -> Subset:
    """Stratified nested subsample keeping ``max(1, round(f * n_class))`` per class.

    ``train_set`` is a sequence of ``(item_id, label)`` pairs. Items are
    ranked per class by a seeded hash and prefixes are taken, so the subset
    at a smaller ``f`` is contained in the subset at a larger one. Classes
    listed in ``classes`` but absent from ``train_set`` are reported in
    ``missing_classes``.
    """
    if not (0.0 < f <= 1.0):
        raise ConfigError(f"fraction must lie in (0, 1], got {f}")
    by_class = defaultdict(list)
    for item_id, label in train_set:
        by_class[label].append(item_id)
    missing = [c for c in (classes or []) if c not in by_class]
    if f == 1.0:
        items = list(train_set)
        return Subset(items, {c: len(v) for c, v in by_class.items()}, missing)
    keep = set()
    per_class = {}
    for label, ids in by_class.items():
        n = max(1, int(math.floor(f * len(ids) + 0.5)))
        ranked = sorted(ids, key=lambda i: (_rank_key(seed, i), str(i)))
        keep.update(ranked[:n])
        per_class[label] = n
    items = [(i, label) for i, label in train_set if i in keep]
    return Subset(items, per_class, missing)
