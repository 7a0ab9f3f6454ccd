"""Random, leave-drug-out and leave-cell-out k-fold plans."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import BaseCrossValidator

MODES = ("random", "leave_drug", "leave_cell")


class SplitError(ValueError):
    pass


def _assign_folds(universe: list, k: int, seed: int) -> list[list]:
    """Seeded shuffle followed by round-robin assignment."""
    order = np.random.default_rng(seed).permutation(len(universe))
    folds: list[list] = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(universe[i])
    return folds


@dataclass
class SplitPlan:
    """Fold membership over records (random) or over drugs / cells (blind modes)."""

    mode: str
    k: int
    seed: int
    folds: list = field(default_factory=list)

    def _keys(self, dataset) -> np.ndarray:
        if self.mode == "random":
            return np.arange(len(dataset))
        if self.mode == "leave_drug":
            return dataset.record_drug_ids()
        return dataset.record_cell_ids()

    def test_indices(self, dataset, fold: int) -> np.ndarray:
        keys = self._keys(dataset)
        members = set(self.folds[fold])
        return np.flatnonzero([key in members for key in keys])

    def train_indices(self, dataset, fold: int) -> np.ndarray:
        test = np.zeros(len(dataset), dtype=bool)
        test[self.test_indices(dataset, fold)] = True
        return np.flatnonzero(~test)

    def to_dict(self) -> dict:
        folds = [[int(v) for v in f] for f in self.folds] if self.mode == "random" else self.folds
        return {"mode": self.mode, "k": self.k, "seed": self.seed, "folds": folds}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "SplitPlan":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(obj["mode"], int(obj["k"]), int(obj["seed"]), obj["folds"])


def make_split(dataset, mode: str = "random", k: int = 5, seed: int = 0) -> SplitPlan:
    if mode not in MODES:
        raise SplitError(f"unknown split mode {mode!r}; expected one of {MODES}")
    if k < 2:
        raise SplitError("k must be at least 2")
    if mode == "random":
        universe = list(range(len(dataset)))
    elif mode == "leave_drug":
        universe = sorted(set(dataset.record_drug_ids()), key=dataset.drug_index.get)
    else:
        universe = sorted(set(dataset.record_cell_ids()), key=dataset.cell_index.get)
    if len(universe) < k:
        what = {"random": "records", "leave_drug": "drugs", "leave_cell": "cells"}[mode]
        raise SplitError(f"{len(universe)} {what} cannot fill {k} folds")
    return SplitPlan(mode, k, seed, _assign_folds(universe, k, seed))


class DrugCellKFold(BaseCrossValidator):
    """Cross-validator over ``(drug_id, cell_id)`` rows.

    Usable anywhere scikit-learn accepts a ``cv`` object; in the blind modes
    the drug (or cell) column decides group membership.
    """

    def __init__(self, mode: str = "random", n_splits: int = 5, seed: int = 0):
        self.mode = mode
        self.n_splits = n_splits
        self.seed = seed

    def get_n_splits(self, X=None, y=None, groups=None):
        return self.n_splits

    def _iter_test_indices(self, X=None, y=None, groups=None):
        pairs = np.asarray(X, dtype=object)
        if self.mode not in MODES:
            raise SplitError(f"unknown split mode {self.mode!r}")
        if self.mode == "random":
            universe = list(range(len(pairs)))
            keys = np.arange(len(pairs))
        else:
            col = 0 if self.mode == "leave_drug" else 1
            keys = pairs[:, col]
            universe = list(dict.fromkeys(keys.tolist()))
        if len(universe) < self.n_splits:
            raise SplitError(f"{len(universe)} groups cannot fill {self.n_splits} folds")
        for fold in _assign_folds(universe, self.n_splits, self.seed):
            members = set(fold)
            yield np.flatnonzero([key in members for key in keys])
