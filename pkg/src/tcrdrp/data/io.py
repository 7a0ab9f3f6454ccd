"""Readers and writers for the drugs / omics / responses file formats.

* drugs: JSON lines ``{"drug_id", "atoms": [[75 floats], ...], "bonds": [[i, j], ...]}``
* omics: JSON lines; the first object is a header
  ``{"header": true, "dims": {...}, "expression_normalized": bool}``, then one
  ``{"cell_id", "mutation", "expression", "methylation"}`` per cell (null = missing)
* responses: CSV with header ``drug_id,cell_id,ln_ic50``
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tcrdrp.data.dataset import Dataset, LoadReport, ResponseRecord
from tcrdrp.data.graphs import DrugGraph, GraphError
from tcrdrp.data.omics import OmicsError, OmicsProfile, RawProfile, preprocess_omics

RESPONSE_FIELDS = ["drug_id", "cell_id", "ln_ic50"]


class DataFormatError(ValueError):
    """Malformed input; the message carries ``path:line``."""


def _json_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def read_drugs(path) -> list[DrugGraph]:
    drugs = []
    for lineno, obj in _json_lines(path):
        try:
            drugs.append(DrugGraph.from_bonds(str(obj["drug_id"]), obj["atoms"], obj.get("bonds", [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}:{lineno}: bad drug record ({exc})") from None
    return drugs


def read_omics(path) -> tuple[list[RawProfile], dict]:
    header: dict = {}
    raw = []
    for lineno, obj in _json_lines(path):
        if obj.get("header"):
            if raw or header:
                raise DataFormatError(f"{path}:{lineno}: header must be the first object")
            header = obj
            continue
        try:
            meth = [np.nan if v is None else float(v) for v in obj["methylation"]]
            prof = RawProfile(
                str(obj["cell_id"]),
                np.asarray(obj["mutation"], dtype=np.float64),
                np.asarray(obj["expression"], dtype=np.float64),
                np.asarray(meth, dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}:{lineno}: bad omics record ({exc})") from None
        dims = header.get("dims")
        if dims:
            got = {"mutation": len(prof.mutation), "expression": len(prof.expression),
                   "methylation": len(prof.methylation)}
            for key, want in dims.items():
                if got.get(key) != want:
                    raise DataFormatError(f"{path}:{lineno}: {key} has {got.get(key)} values, header says {want}")
        raw.append(prof)
    return raw, header


def read_responses(path, require_value: bool = True) -> list[tuple]:
    """Rows of ``(drug_id, cell_id, ln_ic50 or None)``."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        header = [h.strip() for h in header]
        need = RESPONSE_FIELDS if require_value else RESPONSE_FIELDS[:2]
        if header[: len(need)] != need:
            raise DataFormatError(f"{path}:1: expected header starting {','.join(need)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(need):
                raise DataFormatError(f"{path}:{lineno}: expected {len(need)} fields, got {len(row)}")
            value = None
            if require_value:
                try:
                    value = float(row[2])
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: ln_ic50 {row[2]!r} is not a number") from None
                if not np.isfinite(value):
                    raise DataFormatError(f"{path}:{lineno}: ln_ic50 is not finite")
            rows.append((row[0], row[1], value))
    return rows


def load_dataset(drugs_path, omics_path, responses_path) -> Dataset:
    """Load and preprocess the three files; unresolvable records are dropped and counted."""
    for p in (drugs_path, omics_path, responses_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"input file not found: {p}")
    drugs = read_drugs(drugs_path)
    raw, header = read_omics(omics_path)
    try:
        cells = preprocess_omics(raw, expression_normalized=bool(header.get("expression_normalized", False)))
    except OmicsError as exc:
        raise DataFormatError(f"{omics_path}: {exc}") from None
    for g in drugs:
        if g.num_atoms > 100:
            raise GraphError(f"drug {g.drug_id} has {g.num_atoms} atoms, more than the 100-atom budget")
    drug_set = {g.drug_id for g in drugs}
    cell_set = {c.cell_id for c in cells}
    report = LoadReport()
    records = []
    for d, c, v in read_responses(responses_path):
        report.rows_read += 1
        if d not in drug_set:
            report.dropped_unknown_drug += 1
        elif c not in cell_set:
            report.dropped_unknown_cell += 1
        else:
            records.append(ResponseRecord(d, c, v))
    report.loaded = len(records)
    return Dataset(drugs, cells, records, report=report)


def write_drugs(path, drugs: Iterable[DrugGraph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in drugs:
            obj = {"drug_id": g.drug_id, "atoms": g.atom_features.tolist(), "bonds": g.bonds()}
            fh.write(json.dumps(obj) + "\n")


def write_omics(path, profiles: Sequence, expression_normalized: bool) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dims = {}
        if profiles:
            p = profiles[0]
            dims = {"mutation": len(p.mutation), "expression": len(p.expression), "methylation": len(p.methylation)}
        fh.write(json.dumps({"header": True, "dims": dims, "expression_normalized": expression_normalized}) + "\n")
        for p in profiles:
            meth = [None if np.isnan(v) else float(v) for v in p.methylation]
            obj = {
                "cell_id": p.cell_id,
                "mutation": [int(v) for v in p.mutation],
                "expression": [float(v) for v in p.expression],
                "methylation": meth,
            }
            fh.write(json.dumps(obj) + "\n")


def write_responses(path, records: Iterable, extra: Sequence[str] = ()) -> None:
    """Write ``(drug_id, cell_id, value, *extra_values)`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESPONSE_FIELDS + list(extra))
        for row in records:
            w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])


def save_dataset(dataset: Dataset, directory) -> dict[str, Path]:
    """Write an already-preprocessed dataset (expression flagged as normalized)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "drugs": directory / "drugs.jsonl",
        "omics": directory / "omics.jsonl",
        "responses": directory / "responses.csv",
    }
    write_drugs(paths["drugs"], dataset.drugs.values())
    write_omics(paths["omics"], list(dataset.cells.values()), expression_normalized=True)
    write_responses(paths["responses"], dataset.records)
    return paths
