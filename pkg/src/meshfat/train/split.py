"""k-fold splits with a test block and a validation block per fold."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class FoldSplit:
    k: int
    seed: int
    folds: tuple[Fold, ...]
    scheme: str = "train/val/test blocks 3/1/1"

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i) -> Fold:
        return self.folds[i]


def kfold_split(n: int, k: int = 5, seed: int = 0, groups=None) -> FoldSplit:
    """Shuffle ``n`` indices by ``seed`` into ``k`` blocks.

    Fold ``i`` tests on block ``i``, validates on block ``(i + 1) % k`` and
    trains on the rest.  With ``groups`` the blocks are formed over distinct
    group labels so that members of a group never straddle blocks.
    """
    if k < 3:
        raise ValueError("k must be at least 3 (train, validation and test blocks)")
    if groups is None:
        units = np.arange(n)
        members = None
    else:
        groups = np.asarray(groups)
        if len(groups) != n:
            raise ValueError("groups must label every sample")
        units, inverse = np.unique(groups, return_inverse=True)
        members = inverse
    if len(units) < 2 * k:
        raise ValueError(f"need at least {2 * k} samples (or groups) for {k} folds, got {len(units)}")
    order = np.random.default_rng(seed).permutation(len(units))
    blocks = np.array_split(order, k)
    if members is not None:
        blocks = [np.flatnonzero(np.isin(members, b)) for b in blocks]
    blocks = [np.sort(b) for b in blocks]
    folds = []
    for i in range(k):
        j = (i + 1) % k
        rest = np.sort(np.concatenate([blocks[m] for m in range(k) if m not in (i, j)]))
        folds.append(Fold(train=rest, val=blocks[j], test=blocks[i]))
    return FoldSplit(k=k, seed=seed, folds=tuple(folds))
