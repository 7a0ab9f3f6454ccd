"""Cell-line omics profiles and their preprocessing."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class OmicsError(ValueError):
    pass


@dataclass(frozen=True)
class OmicsProfile:
    cell_id: str
    mutation: np.ndarray
    expression: np.ndarray
    methylation: np.ndarray

    def channels(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.mutation, self.expression, self.methylation


@dataclass
class RawProfile:
    """Omics as read from disk: methylation may contain NaN for missing."""

    cell_id: str
    mutation: np.ndarray
    expression: np.ndarray
    methylation: np.ndarray


def quantile_normalize(matrix) -> np.ndarray:
    """Force every row onto the mean sorted row.

    Tied values within a row receive the mean of the reference quantiles
    their ranks span.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise OmicsError(f"quantile_normalize expects a 2-D matrix, got {m.shape}")
    reference = np.sort(m, axis=1).mean(axis=0)
    csum = np.concatenate([[0.0], np.cumsum(reference)])
    out = np.empty_like(m)
    for i, row in enumerate(m):
        lo = rankdata(row, method="min").astype(int)
        hi = rankdata(row, method="max").astype(int)
        out[i] = (csum[hi] - csum[lo - 1]) / (hi - lo + 1)
    return out


def impute_median(matrix) -> np.ndarray:
    """Replace NaN entries by the per-column median over rows."""
    m = np.array(matrix, dtype=np.float64)
    missing = np.isnan(m)
    if not missing.any():
        return m
    empty = missing.all(axis=0)
    if empty.any():
        cols = np.flatnonzero(empty).tolist()
        raise OmicsError(f"methylation features {cols} are missing for every cell")
    med = np.nanmedian(m, axis=0)
    m[missing] = np.broadcast_to(med, m.shape)[missing]
    return m


def preprocess_omics(raw: Sequence[RawProfile], expression_normalized: bool = False) -> list[OmicsProfile]:
    """Validate mutations, log2 + quantile-normalize expression, impute methylation.

    With ``expression_normalized`` the expression block is passed through
    untouched, which makes the transform idempotent on its own output.
    """
    if not raw:
        return []
    mut = np.vstack([np.asarray(r.mutation, dtype=np.float64) for r in raw])
    bad = ~np.isin(mut, (0.0, 1.0))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise OmicsError(f"cell {raw[row].cell_id}: mutation entry {col} is {mut[row, col]!r}, expected 0 or 1")
    expr = np.vstack([np.asarray(r.expression, dtype=np.float64) for r in raw])
    if not expression_normalized:
        if np.isnan(expr).any() or (expr <= 0).any():
            row = int(np.argwhere(~(expr > 0))[0][0])
            raise OmicsError(f"cell {raw[row].cell_id}: expression must be positive before log2")
        expr = quantile_normalize(np.log2(expr))
    meth = impute_median(np.vstack([np.asarray(r.methylation, dtype=np.float64) for r in raw]))
    return [
        OmicsProfile(r.cell_id, mut[i], expr[i], meth[i])
        for i, r in enumerate(raw)
    ]
