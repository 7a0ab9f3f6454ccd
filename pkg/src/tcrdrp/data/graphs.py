"""Drug graphs: symmetric-normalized adjacency and fixed-size padding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ATOM_FEATURES = 75
MAX_ATOMS = 100


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class DrugGraph:
    """One compound: per-atom feature rows plus a boolean bond matrix."""

    drug_id: str
    atom_features: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.atom_features, dtype=np.float64)
        adj = np.asarray(self.adjacency, dtype=bool)
        if feats.ndim != 2 or feats.shape[1] != ATOM_FEATURES:
            raise GraphError(
                f"drug {self.drug_id}: atom features must be (n, {ATOM_FEATURES}), got {feats.shape}"
            )
        n = feats.shape[0]
        if n == 0:
            raise GraphError(f"drug {self.drug_id}: no atoms")
        if adj.shape != (n, n):
            raise GraphError(f"drug {self.drug_id}: adjacency {adj.shape} does not match {n} atoms")
        if not np.array_equal(adj, adj.T):
            raise GraphError(f"drug {self.drug_id}: adjacency is not symmetric")
        object.__setattr__(self, "atom_features", feats)
        object.__setattr__(self, "adjacency", adj)

    @property
    def num_atoms(self) -> int:
        return self.atom_features.shape[0]

    @classmethod
    def from_bonds(cls, drug_id: str, atoms, bonds) -> "DrugGraph":
        feats = np.asarray(atoms, dtype=np.float64)
        n = feats.shape[0] if feats.ndim == 2 else 0
        adj = np.zeros((n, n), dtype=bool)
        for i, j in bonds:
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"drug {drug_id}: bond ({i}, {j}) out of range for {n} atoms")
            adj[i, j] = adj[j, i] = True
        return cls(drug_id, feats, adj)

    def bonds(self) -> list[list[int]]:
        ii, jj = np.nonzero(np.triu(self.adjacency, 1))
        return [[int(i), int(j)] for i, j in zip(ii, jj)]


@dataclass(frozen=True)
class PaddedDrugGraph:
    atom_features: np.ndarray  # (MAX_ATOMS, ATOM_FEATURES)
    norm_adjacency: np.ndarray  # (MAX_ATOMS, MAX_ATOMS)
    atom_mask: np.ndarray  # bool (MAX_ATOMS,)

    @property
    def num_atoms(self) -> int:
        return int(self.atom_mask.sum())


def normalize_adjacency(adjacency) -> np.ndarray:
    """Return ``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``."""
    adj = np.asarray(adjacency, dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise GraphError(f"adjacency must be square, got {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise GraphError("adjacency is not symmetric")
    a = adj.astype(np.float64)
    np.fill_diagonal(a, 1.0)
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    out = a * inv_sqrt[:, None] * inv_sqrt[None, :]
    # exact symmetry regardless of rounding order
    return np.triu(out) + np.triu(out, 1).T


def pad_graph(g: DrugGraph, max_atoms: int = MAX_ATOMS) -> PaddedDrugGraph:
    """Normalize, then zero-pad to ``max_atoms``; drugs that do not fit are rejected."""
    n = g.num_atoms
    if n > max_atoms:
        raise GraphError(f"drug {g.drug_id} has {n} atoms, more than the {max_atoms}-atom budget")
    feats = np.zeros((max_atoms, ATOM_FEATURES))
    feats[:n] = g.atom_features
    norm = np.zeros((max_atoms, max_atoms))
    norm[:n, :n] = normalize_adjacency(g.adjacency)
    mask = np.zeros(max_atoms, dtype=bool)
    mask[:n] = True
    return PaddedDrugGraph(feats, norm, mask)
