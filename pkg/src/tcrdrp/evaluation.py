"""Correlation metrics, responder analysis and the one-hot identity ablation."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from tcrdrp.data.omics import OmicsProfile
from tcrdrp.data.splits import make_split
from tcrdrp.model import predict_dataset
from tcrdrp.training import derive_seed, fit


class UndefinedMetric(ValueError):
    """A correlation is undefined (zero variance or too few samples)."""


def _pair(x, y, what: str, min_len: int = 2):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"{what}: length mismatch {x.size} vs {y.size}")
    if x.size < min_len:
        raise UndefinedMetric(f"{what}: need at least {min_len} values, got {x.size}")
    return x, y


def _flat(v: np.ndarray) -> bool:
    # identical inputs can come out of BLAS a few ulps apart
    return np.ptp(v) <= 16 * np.finfo(np.float64).eps * np.max(np.abs(v))


def pearson(x, y) -> float:
    x, y = _pair(x, y, "pearson")
    if _flat(x) or _flat(y):
        raise UndefinedMetric("pearson: zero variance")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def spearman(x, y) -> float:
    x, y = _pair(x, y, "spearman")
    return pearson(rankdata(x), rankdata(y))


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth, "rmse", min_len=1)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def _group_pcc(keys, pred, truth, min_samples: int):
    keys = np.asarray(keys, dtype=object)
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    table, skipped = [], 0
    for k in dict.fromkeys(keys.tolist()):
        sel = keys == k
        n = int(sel.sum())
        pcc = None
        if n >= min_samples:
            try:
                pcc = pearson(pred[sel], truth[sel])
            except UndefinedMetric:
                pcc = None
        if pcc is None:
            skipped += 1
        table.append((k, n, pcc))
    return table, skipped


def drug_pcc(drug_ids, pred, truth, min_samples: int = 2):
    """Unweighted mean of per-drug PCC, plus the per-drug table.

    Drugs with fewer than ``min_samples`` records or zero variance are
    skipped (``pcc`` is ``None`` in the table) and never counted as 0.
    """
    table, _ = _group_pcc(drug_ids, pred, truth, min_samples)
    kept = [pcc for _, _, pcc in table if pcc is not None]
    if not kept:
        raise UndefinedMetric("drug_pcc: no drug survives the sample-size and variance filters")
    return float(np.mean(kept)), table


@dataclass
class MetricReport:
    overall_pcc: Optional[float]
    drug_pcc: Optional[float]
    scc: Optional[float]
    rmse: float
    n_records: int
    n_drugs_skipped: int
    n_cells_skipped: int
    per_drug: list = field(default_factory=list)
    per_cell: list = field(default_factory=list)

    def headline(self) -> dict:
        return {"pcc": self.overall_pcc, "drug_pcc": self.drug_pcc, "scc": self.scc, "rmse": self.rmse}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_drug"] = [{"drug_id": k, "n": n, "pcc": p} for k, n, p in self.per_drug]
        d["per_cell"] = [{"cell_id": k, "n": n, "pcc": p} for k, n, p in self.per_cell]
        return d

    def write(self, out_dir, prefix: str = "") -> list:
        """Write ``report.json``, ``per_drug.csv`` and ``per_cell.csv``; return the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{prefix}report.json", out / f"{prefix}per_drug.csv", out / f"{prefix}per_cell.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        for path, col, rows in ((paths[1], "drug_id", self.per_drug), (paths[2], "cell_id", self.per_cell)):
            _write_table(path, [col, "n", "pcc"], rows)
        return paths


def _write_table(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])


def _maybe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetric:
        return None


def metric_report(drug_ids, cell_ids, pred, truth, min_samples: int = 2) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    per_drug, skip_d = _group_pcc(drug_ids, pred, truth, min_samples)
    per_cell, skip_c = _group_pcc(cell_ids, pred, truth, min_samples)
    kept = [p for _, _, p in per_drug if p is not None]
    return MetricReport(
        overall_pcc=_maybe(pearson, pred, truth),
        drug_pcc=float(np.mean(kept)) if kept else None,
        scc=_maybe(spearman, pred, truth),
        rmse=rmse(pred, truth),
        n_records=len(pred),
        n_drugs_skipped=skip_d,
        n_cells_skipped=skip_c,
        per_drug=per_drug,
        per_cell=per_cell,
    )


def write_scatter(path, table_a: Sequence, table_b: Sequence) -> None:
    """Per-drug PCC of two models side by side, over drugs scored by both."""
    b = {k: p for k, _, p in table_b}
    rows = [(k, p, b[k]) for k, _, p in table_a if p is not None and b.get(k) is not None]
    _write_table(path, ["drug_id", "pcc_model_a", "pcc_model_b"], rows)


# -- responder analysis -------------------------------------------------------------

@dataclass(frozen=True)
class ResponderSet:
    predicted: np.ndarray
    responder: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.predicted, dtype=np.float64).ravel()
        r = np.asarray(self.responder, dtype=bool).ravel()
        if p.shape != r.shape:
            raise ValueError("ResponderSet: predictions and labels differ in length")
        object.__setattr__(self, "predicted", p)
        object.__setattr__(self, "responder", r)

    def groups(self):
        resp, non = self.predicted[self.responder], self.predicted[~self.responder]
        if resp.size == 0 or non.size == 0:
            raise ValueError("responder analysis needs both responders and non-responders")
        return resp, non


def auc_from_ic50(responders: ResponderSet) -> float:
    """P(score_responder > score_non) with ``score = -predicted``; ties count one half."""
    resp, non = responders.groups()
    ranks = rankdata(np.concatenate([-resp, -non]))
    n1, n0 = resp.size, non.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2
    return float(u / (n1 * n0))


def effect_size(responders: ResponderSet) -> float:
    resp, non = responders.groups()
    return float(non.mean() - resp.mean())


def _u_statistic(ranks_a: np.ndarray, n_a: int) -> float:
    return float(ranks_a.sum() - n_a * (n_a + 1) / 2)


def rank_sum_test(group_a, group_b, exact_limit: int = 12):
    """Mann-Whitney U for ``group_a`` and a two-sided p-value.

    Exact (enumerating every assignment of the pooled average ranks) when the
    pooled size is at most ``exact_limit``, else the normal approximation
    with tie and continuity corrections.
    """
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("rank_sum_test: both groups must be non-empty")
    n, m = a.size, b.size
    ranks = rankdata(np.concatenate([a, b]))
    u = _u_statistic(ranks[:n], n)
    mean_u = n * m / 2.0
    if n + m <= exact_limit:
        null = np.array([_u_statistic(ranks[list(c)], n) for c in itertools.combinations(range(n + m), n)])
        tol = 1e-9
        lower = np.mean(null <= u + tol)
        upper = np.mean(null >= u - tol)
        p = min(1.0, 2.0 * min(lower, upper))
        return u, float(p)
    _, counts = np.unique(ranks, return_counts=True)
    N = n + m
    var_u = n * m / 12.0 * ((N + 1) - np.sum(counts ** 3 - counts) / (N * (N - 1)))
    if var_u <= 0:
        return u, 1.0
    z = (abs(u - mean_u) - 0.5) / math.sqrt(var_u)
    p = 2.0 * (1.0 - ndtr(max(z, 0.0)))
    return u, float(min(1.0, p))


def pcc_threshold_filter(tables: Sequence[Sequence], p: float, min_samples: int = 10) -> list:
    """Drugs where at least one model reaches per-drug PCC ``>= p``.

    ``tables`` holds one ``(drug_id, n, pcc)`` table per model; drugs with
    fewer than ``min_samples`` records are dropped outright.
    """
    order: dict = {}
    for table in tables:
        for drug, n, pcc in table:
            entry = order.setdefault(drug, {"n": n, "pccs": []})
            entry["n"] = min(entry["n"], n)
            entry["pccs"].append(pcc)
    return [
        d for d, e in order.items()
        if e["n"] >= min_samples and any(pc is not None and pc >= p for pc in e["pccs"])
    ]


# -- one-hot identity ablation --------------------------------------------------------

def onehot_cells(dataset, universe: str = "all") -> list:
    """Replace every omics channel with a one-hot cell identity vector.

    ``universe="all"`` indexes over every cell in the dataset; with
    ``universe`` set to a list of cell ids, cells outside it get all-zero
    vectors, which is what an unseen test cell looks like.
    """
    ids = dataset.cell_ids if universe == "all" else list(universe)
    pos = {c: i for i, c in enumerate(ids)}
    out = []
    for c in dataset.cell_ids:
        v = np.zeros(len(ids))
        if c in pos:
            v[pos[c]] = 1.0
        out.append(OmicsProfile(c, v.copy(), v.copy(), v.copy()))
    return out


@dataclass
class AblationResult:
    onehot: MetricReport
    folds: int
    seed: int
    fold_reports: list = field(default_factory=list)

    def row(self) -> dict:
        return {"setting": "onehot", "pcc": self.onehot.overall_pcc, "drug_pcc": self.onehot.drug_pcc,
                "scc": self.onehot.scc, "rmse": self.onehot.rmse, "folds": self.folds, "seed": self.seed}


def cross_validate(dataset, plan, folds, model_config, train_config, seed: int = 0):
    """Train on each selected fold and pool the held-out predictions."""
    test_all, pred_all, reports = [], [], []
    for f in folds:
        tr, te = plan.train_indices(dataset, f), plan.test_indices(dataset, f)
        cfg = replace(train_config, seed=derive_seed(seed, f))
        result = fit(dataset, tr, model_config, cfg)
        pred = predict_dataset(result.params, dataset, te)
        test_all.append(te)
        pred_all.append(pred)
        reports.append(metric_report(dataset.record_drug_ids()[te], dataset.record_cell_ids()[te],
                                     pred, dataset.y[te]))
    te = np.concatenate(test_all)
    pred = np.concatenate(pred_all)
    pooled = metric_report(dataset.record_drug_ids()[te], dataset.record_cell_ids()[te], pred, dataset.y[te])
    return pooled, reports, te, pred


def onehot_ablation(dataset, model_config, train_config, k: int = 5, folds=None, seed: int = 0,
                    universe: str = "all") -> AblationResult:
    """Leave-cell-out training with one-hot cell identities instead of omics."""
    plan = make_split(dataset, "leave_cell", k, seed)
    folds = list(range(k)) if folds is None else list(folds)
    if universe == "train":
        # per fold, only training cells get an identity column
        pooled_te, pooled_pred, reports = [], [], []
        for f in folds:
            train_cells = sorted(set(dataset.record_cell_ids()[plan.train_indices(dataset, f)]),
                                 key=dataset.cell_index.get)
            ds = dataset.with_cells(onehot_cells(dataset, train_cells))
            pooled, fr, te, pred = cross_validate(ds, plan, [f], model_config, train_config, seed)
            reports += fr
            pooled_te.append(te)
            pooled_pred.append(pred)
        te, pred = np.concatenate(pooled_te), np.concatenate(pooled_pred)
        report = metric_report(dataset.record_drug_ids()[te], dataset.record_cell_ids()[te], pred, dataset.y[te])
        return AblationResult(report, len(folds), seed, reports)
    ds = dataset.with_cells(onehot_cells(dataset))
    report, reports, _, _ = cross_validate(ds, plan, folds, model_config, train_config, seed)
    return AblationResult(report, len(folds), seed, reports)
