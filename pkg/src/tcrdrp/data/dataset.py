from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from tcrdrp.data.graphs import DrugGraph, PaddedDrugGraph, normalize_adjacency, pad_graph
from tcrdrp.data.omics import OmicsProfile


class ResponseRecord(NamedTuple):
    drug_id: str
    cell_id: str
    ln_ic50: float


@dataclass
class LoadReport:
    rows_read: int = 0
    loaded: int = 0
    dropped_unknown_drug: int = 0
    dropped_unknown_cell: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_unknown_drug + self.dropped_unknown_cell


class Dataset:
    """Immutable bundle of drug graphs, omics profiles and response records.

    Records are held as parallel arrays (``drug_idx``, ``cell_idx``, ``y``)
    indexing into ``drug_ids`` / ``cell_ids``.
    """

    def __init__(
        self,
        drugs: Sequence[DrugGraph],
        cells: Sequence[OmicsProfile],
        records: Sequence[ResponseRecord],
        report: Optional[LoadReport] = None,
        latents: Optional[dict] = None,
    ):
        self.drugs = {g.drug_id: g for g in drugs}
        self.cells = {c.cell_id: c for c in cells}
        if len(self.drugs) != len(drugs) or len(self.cells) != len(cells):
            raise ValueError("duplicate drug or cell identifiers")
        self.drug_ids = list(self.drugs)
        self.cell_ids = list(self.cells)
        self.drug_index = {d: i for i, d in enumerate(self.drug_ids)}
        self.cell_index = {c: i for i, c in enumerate(self.cell_ids)}
        missing = [r for r in records if r.drug_id not in self.drugs or r.cell_id not in self.cells]
        if missing:
            r = missing[0]
            raise KeyError(f"record ({r.drug_id}, {r.cell_id}) references an unknown drug or cell")
        self.drug_idx = np.array([self.drug_index[r.drug_id] for r in records], dtype=np.intp)
        self.cell_idx = np.array([self.cell_index[r.cell_id] for r in records], dtype=np.intp)
        self.y = np.array([float(r.ln_ic50) for r in records], dtype=np.float64)
        self.report = report or LoadReport(len(records), len(records))
        self.latents = latents
        self._padded: dict[str, PaddedDrugGraph] = {}
        self._packed: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        dims = {tuple(len(v) for v in c.channels()) for c in cells}
        if len(dims) > 1:
            raise ValueError(f"cells disagree on omics dimensions: {sorted(dims)}")
        self.omics_dims = dims.pop() if dims else (0, 0, 0)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def records(self) -> list[ResponseRecord]:
        return [
            ResponseRecord(self.drug_ids[d], self.cell_ids[c], float(v))
            for d, c, v in zip(self.drug_idx, self.cell_idx, self.y)
        ]

    def record_drug_ids(self) -> np.ndarray:
        return np.array(self.drug_ids, dtype=object)[self.drug_idx]

    def record_cell_ids(self) -> np.ndarray:
        return np.array(self.cell_ids, dtype=object)[self.cell_idx]

    def padded(self, drug_id: str) -> PaddedDrugGraph:
        if drug_id not in self._padded:
            self._padded[drug_id] = pad_graph(self.drugs[drug_id])
        return self._padded[drug_id]

    def packed(self, drug_id: str) -> tuple[np.ndarray, np.ndarray]:
        """Real-atom features and normalized adjacency, without padding."""
        if drug_id not in self._packed:
            g = self.drugs[drug_id]
            self.padded(drug_id)  # enforces the atom budget
            self._packed[drug_id] = (g.atom_features, normalize_adjacency(g.adjacency))
        return self._packed[drug_id]

    def omics_matrix(self, channel: int) -> np.ndarray:
        return np.vstack([self.cells[c].channels()[channel] for c in self.cell_ids])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        out = self._clone()
        out.drug_idx = self.drug_idx[idx]
        out.cell_idx = self.cell_idx[idx]
        out.y = self.y[idx]
        return out

    def with_cells(self, cells: Sequence[OmicsProfile]) -> "Dataset":
        """Same records and drugs with replacement omics profiles."""
        return Dataset(list(self.drugs.values()), cells, self.records, latents=self.latents)

    def with_records(self, records: Sequence[ResponseRecord]) -> "Dataset":
        return Dataset(list(self.drugs.values()), list(self.cells.values()), records, latents=self.latents)

    def _clone(self) -> "Dataset":
        out = Dataset.__new__(Dataset)
        out.__dict__.update(self.__dict__)
        return out
