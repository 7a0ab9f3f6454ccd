"""Acceptance criteria 1-10.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per criterion
is printed in the terminal summary. Criteria 5-7 train real models and take
several minutes together.
"""
import csv
import json
import math
import sys

import numpy as np
import pytest

import oracles
from conftest import criterion
from test_core import OP_CASES, _rand
from tcrdrp.cli import main
from tcrdrp.core import Tensor, grad_check, grad_check_params, ops
from tcrdrp.data import (
    Dataset, DrugGraph, OmicsProfile, ResponseRecord, make_split, normalize_adjacency, pad_graph, synth_generate,
)
from tcrdrp.evaluation import (
    ResponderSet, UndefinedMetric, auc_from_ic50, drug_pcc, onehot_ablation, pearson, rank_sum_test, rmse,
    spearman,
)
from tcrdrp.model import (
    ModelConfig, aoa_attention, dataset_batch, forward, gcn_forward, init_params, predict_dataset, predict_ic50,
)
from tcrdrp.training import TrainConfig, combined_loss, fit, rank_label, rank_loss


@pytest.fixture(scope="module")
def learnable():
    return synth_generate(40, 60, noise_sd=0.3, seed=1)


def _pairs_of(ds, idx):
    return [(ds.padded(ds.drug_ids[ds.drug_idx[i]]), ds.cells[ds.cell_ids[ds.cell_idx[i]]]) for i in idx]


def test_criterion_01_gradients():
    with criterion(1, "gradient suite") as notes:
        worst = 0.0
        for name, (fn, shape) in sorted(OP_CASES.items()):
            err = grad_check(fn, _rand(*shape, seed=len(name)))
            assert err <= 1e-6, f"{name}: rel err {err:.2e}"
            worst = max(worst, err)
        ds = synth_generate(4, 5, dims=(12, 8, 8), seed=3, max_atoms=12)
        p = init_params(ModelConfig(), ds.omics_dims, seed=0)
        rec = [0, 1, 6, 11, 17]
        batch = dataset_batch(ds, rec)
        pairs = np.array([[0, 1], [2, 3], [0, 4], [1, 2]])

        def loss():
            pred = forward(p, batch, training=True, rng=np.random.default_rng(5))
            return combined_loss(pred, ds.y[rec], pairs, beta=0.9, margin=0.0)[0]

        rng = np.random.default_rng(1)
        chosen = rng.choice(p.paths(), size=32, replace=False)
        e2e = grad_check_params(loss, [(p[c], int(rng.integers(p[c].size))) for c in chosen])
        assert e2e <= 1e-4, f"end-to-end rel err {e2e:.2e}"
        notes.append(f"{len(OP_CASES)} ops max {worst:.1e}, end-to-end over 32 params {e2e:.1e}")


def test_criterion_02_formulas():
    with criterion(2, "formula fidelity"):
        s6 = 1 / math.sqrt(6)
        path = normalize_adjacency([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        assert np.allclose(path, [[0.5, s6, 0], [s6, 1 / 3, s6], [0, s6, 0.5]], atol=1e-15, rtol=0)

        assert ops.softmax_masked(Tensor([0.0, 0.0])).values.tolist() == [0.5, 0.5]
        assert np.allclose(ops.softmax_masked(Tensor([math.log(2), 0.0])).values, [2 / 3, 1 / 3], atol=1e-15)
        assert ops.softmax_masked(Tensor([5.0, 5.0, 5.0]), [True, True, False]).values.tolist() == [0.5, 0.5, 0]
        cfg = ModelConfig(d_model=1, n_heads=1, d_k=1, gcn_widths=(1,), omics_hidden=(2,), ff_inner=2,
                          conv_channels=(1,))
        p = init_params(cfg, (2, 2, 2))
        for name, value in (("w_q", 1.0), ("w_k", 1.0), ("w_v", 1 / math.log(2))):
            p.set(f"blocks.0.aoa.head0.{name}", [[value]])
        p.set("blocks.0.aoa.w_o", [[1.0]])
        atoms = np.zeros((100, 1))
        atoms[0] = 1.0
        mask = np.arange(100) == 0
        out = aoa_attention(atoms, np.array([[math.log(2)], [0.0], [0.0]]), mask, p).values
        assert abs(out[0, 0] - 0.5) <= 1e-15

        assert [rank_label(2.0, 1.5), rank_label(1.0, 1.0), rank_label(-3.0, -2.5)] == [1, -1, -1]
        assert [rank_loss(2.0, 1.0, 1, 0), rank_loss(2.0, 1.0, -1, 0), rank_loss(1.0, 1.0, 1, 0.5)] == [0, 1, 0.5]
        total, mse, rank = combined_loss(Tensor([1.0, 0.0]), [0.0, 1.0], [[0, 1]], beta=0.5)
        assert (mse.item(), rank.item(), total.item()) == (1.0, 1.0, 1.0)

        pred = Tensor(np.random.default_rng(0).normal(size=6))
        y = np.random.default_rng(1).normal(size=6)
        pairs = [[0, 1], [2, 5], [3, 4], [1, 5]]
        for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
            total, mse, rank = combined_loss(pred, y, pairs, beta=beta)
            assert total.item() == beta * mse.item() + (1 - beta) * rank.item()


def test_criterion_03_invariants():
    with criterion(3, "structural invariants") as notes:
        ds = synth_generate(4, 5, dims=(12, 8, 8), seed=3, max_atoms=12)
        cfg = ModelConfig(d_model=8, n_heads=2, d_k=4, gcn_widths=(8, 8), omics_hidden=(6,), ff_inner=10,
                          conv_channels=(4, 3))
        params = init_params(cfg, ds.omics_dims, seed=1)

        weights = []
        forward(params, dataset_batch(ds, np.arange(len(ds))), attention_out=weights)
        rows = max(float(np.max(np.abs(w.sum(axis=1) - 1))) for w in weights)
        assert rows <= 1e-12

        items = _pairs_of(ds, range(8))
        rng = np.random.default_rng(9)
        dirty = []
        for g, prof in items:
            feats = g.atom_features.copy()
            feats[~g.atom_mask] = rng.normal(size=feats[~g.atom_mask].shape)
            dirty.append((type(g)(feats, g.norm_adjacency, g.atom_mask), prof))
        pad = float(np.max(np.abs(predict_ic50(items, params).values - predict_ic50(dirty, params).values)))
        assert pad <= 1e-9

        equi = 0.0
        for d in ds.drug_ids:
            g = ds.drugs[d]
            perm = rng.permutation(g.num_atoms)
            gp = DrugGraph("p", g.atom_features[perm], g.adjacency[np.ix_(perm, perm)])
            a = gcn_forward(pad_graph(g), params).values[: g.num_atoms]
            b = gcn_forward(pad_graph(gp), params).values[: g.num_atoms]
            equi = max(equi, float(np.max(np.abs(b - a[perm]))))
        assert equi <= 1e-9

        first = predict_dataset(params, ds)
        assert np.array_equal(first, predict_dataset(params, ds))
        assert np.array_equal(first, predict_dataset(params, ds, batch_size=3))
        twin = predict_ic50(_pairs_of(ds, [2, 2]), params, rng=np.random.default_rng(4)).values
        assert twin[0] == twin[1]
        notes.append(f"rows {rows:.1e}, padding {pad:.1e}, equivariance {equi:.1e}")


def test_criterion_04_metric_oracles():
    with criterion(4, "metric oracles") as notes:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(4, 40))
            # coarse rounding makes ties common
            x = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
            y = np.round(rng.normal(size=n) + rng.normal() * x, 2)
            ids = rng.choice(list("abcdef"), size=n).tolist()
            diffs = [abs(rmse(x, y) - oracles.rmse(x.tolist(), y.tolist()))]
            if np.ptp(x) > 0 and np.ptp(y) > 0:
                diffs.append(abs(pearson(x, y) - oracles.pearson(x.tolist(), y.tolist())))
                diffs.append(abs(spearman(x, y) - oracles.spearman(x.tolist(), y.tolist())))
            try:
                diffs.append(abs(drug_pcc(ids, x, y)[0] - oracles.drug_pcc(ids, x.tolist(), y.tolist())))
            except UndefinedMetric:
                pass
            lab = rng.random(n) < 0.4
            lab[:2] = [True, False]
            diffs.append(abs(auc_from_ic50(ResponderSet(x, lab)) - oracles.auc(x[lab].tolist(), x[~lab].tolist())))
            worst = max(worst, max(diffs))
        assert worst <= 1e-10

        sizes = 0
        for n in range(1, 8):
            for m in range(1, 9 - n):
                for trial in range(3):
                    a = rng.integers(0, 4, size=n).astype(float)
                    b = rng.integers(0, 4, size=m).astype(float)
                    u, p = rank_sum_test(a, b)
                    ou, op = oracles.rank_sum_exact(a, b)
                    assert u == ou and abs(p - op) <= 1e-12, (a, b, p, op)
                sizes += 1
        notes.append(f"200 instances max diff {worst:.1e}; {sizes} (n, m) size pairs enumerated")


@pytest.mark.slow
def test_criterion_05_overfit():
    with criterion(5, "overfit capacity") as notes:
        ds = synth_generate(8, 8, noise_sd=0.0, seed=0)
        assert len(ds) == 64
        res = fit(ds, config=TrainConfig(steps=2000, stop_at_train_mse=0.05, seed=0))
        assert res.final_train_mse < 0.05, f"train MSE {res.final_train_mse:.4f} after {res.state.step} steps"
        notes.append(f"train MSE {res.final_train_mse:.4f} at step {res.state.step}")


@pytest.mark.slow
def test_criterion_06_learning(learnable):
    with criterion(6, "end-to-end learning") as notes:
        plan = make_split(learnable, "random", 5, 0)
        tr, te = plan.train_indices(learnable, 0), plan.test_indices(learnable, 0)
        cfg = TrainConfig(learning_rate=1e-4, epochs=60, batch_pairs=32, seed=0)
        res = fit(learnable, tr, ModelConfig.small(), cfg)
        pred = predict_dataset(res.params, learnable, te)
        value, _ = drug_pcc(learnable.record_drug_ids()[te], pred, learnable.y[te])
        assert value >= 0.5, f"held-out DrugPCC {value:.3f}"
        notes.append(f"held-out DrugPCC {value:.3f} after {res.state.step} steps")


@pytest.mark.slow
def test_criterion_07_onehot(learnable):
    with criterion(7, "one-hot ablation") as notes:
        cfg = TrainConfig(learning_rate=1e-4, epochs=60, batch_pairs=32)
        res = onehot_ablation(learnable, ModelConfig.small(), cfg, k=5, seed=0, universe="all")
        r = res.onehot
        notes.append(f"PCC {r.overall_pcc:.3f}, DrugPCC {r.drug_pcc:.3f}")
        assert r.overall_pcc >= 0.6 and r.drug_pcc <= 0.15, notes[-1]


def _random_dataset(rng):
    nd, nc = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    drugs = [DrugGraph.from_bonds(f"D{i}", np.ones((1, 75)), []) for i in range(nd)]
    cells = [OmicsProfile(f"C{j}", np.zeros(1), np.zeros(1), np.zeros(1)) for j in range(nc)]
    keep = rng.random((nd, nc)) < rng.uniform(0.4, 1.0)
    keep[:, 0] = keep[0, :] = True  # every drug and cell has a record
    recs = [ResponseRecord(f"D{i}", f"C{j}", 0.0) for i in range(nd) for j in range(nc) if keep[i, j]]
    return Dataset(drugs, cells, recs)


def test_criterion_08_splits():
    with criterion(8, "split integrity") as notes:
        rng = np.random.default_rng(8)
        checked = 0
        for seed in range(100):
            ds = _random_dataset(rng)
            for mode in ("random", "leave_drug", "leave_cell"):
                groups = {"random": len(ds), "leave_drug": len(ds.drug_ids), "leave_cell": len(ds.cell_ids)}[mode]
                k = int(rng.integers(2, min(groups, 5) + 1))
                plan = make_split(ds, mode, k, seed)
                tests = [plan.test_indices(ds, f) for f in range(k)]
                assert sorted(np.concatenate(tests).tolist()) == list(range(len(ds)))
                for f in range(k):
                    tr = plan.train_indices(ds, f)
                    assert not set(tr.tolist()) & set(tests[f].tolist())
                    assert len(tr) + len(tests[f]) == len(ds)
                    if mode != "random":
                        keys = ds.record_drug_ids() if mode == "leave_drug" else ds.record_cell_ids()
                        assert not set(keys[tr]) & set(keys[tests[f]])
                checked += 1
        notes.append(f"{checked} plans")


TINY_RUN = """
[synth]
n_drugs = 4
n_cells = 5
dims = 6, 4, 4
min_atoms = 3
max_atoms = 8

[model]
d_model = 8
n_heads = 2
d_k = 4
gcn_widths = 8, 8
omics_hidden = 8
ff_inner = 8
conv_channels = 3, 3
max_atoms = 8

[train]
batch_pairs = 4
steps = 6

[split]
k = 2
"""


def _run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"tcrdrp {argv[0]} exited with {code}"


def _same_files(a, b, pattern="**/*"):
    """Compare every file matching ``pattern`` except the manifests, which record their own paths."""
    listing = lambda root: sorted(p.relative_to(root) for p in root.glob(pattern)
                                  if p.is_file() and p.name != "manifest.json")
    names = listing(a)
    assert names and names == listing(b)
    return all((a / n).read_bytes() == (b / n).read_bytes() for n in names), len(names)


def test_criterion_09_reproducibility(tmp_path):
    with criterion(9, "manifest reproducibility") as notes:
        conf = tmp_path / "run.ini"
        conf.write_text(TINY_RUN)
        _run("train", "--config", conf, "--out", tmp_path / "first", "--seed", 11)
        manifest = tmp_path / "first" / "manifest.json"
        _run("train", "--config", manifest, "--out", tmp_path / "second")
        _run("train", "--config", manifest, "--out", tmp_path / "third")
        for other in ("second", "third"):
            same, n_hist = _same_files(tmp_path / "first", tmp_path / other, "fold*/loss_history.csv")
            assert same, "loss histories differ"

        _run("evaluate", "--run", tmp_path / "second", "--out", tmp_path / "eval_a")
        _run("evaluate", "--config", tmp_path / "eval_a" / "manifest.json", "--run", tmp_path / "third",
             "--out", tmp_path / "eval_b")
        same, n_rep = _same_files(tmp_path / "eval_a", tmp_path / "eval_b")
        assert same, "evaluation reports differ"
        notes.append(f"{n_hist} loss histories and {n_rep} report files bitwise identical")


def test_criterion_10_beta_sweep(tmp_path):
    with criterion(10, "beta sweep harness") as notes:
        conf = tmp_path / "sweep.ini"
        conf.write_text(TINY_RUN)
        for out in ("a", "b"):
            _run("sweep-beta", "--config", conf, "--out", tmp_path / out, "--folds", "0")
        text = (tmp_path / "a" / "sweep.csv").read_bytes()
        assert text == (tmp_path / "b" / "sweep.csv").read_bytes()
        with open(tmp_path / "a" / "sweep.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["beta", "drug_pcc", "pcc", "scc", "rmse"]
        grid = [round(0.1 * i, 1) for i in range(1, 11)]
        assert [float(r[0]) for r in rows[1:]] == grid
        for r in rows[1:]:
            for v in r[1:]:
                assert v == "" or math.isfinite(float(v))
        with open(tmp_path / "a" / "beta9" / "fold0" / "loss_history.csv", newline="") as fh:
            hist = list(csv.DictReader(fh))
        assert hist and all(float(h["total"]) == float(h["mse"]) for h in hist)
        nonzero_rank = sum(float(h["rank"]) > 0 for h in hist)
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["config"]["run"]["betas"] == grid
        notes.append(f"10 rows; beta=1 total == mse on {len(hist)} steps ({nonzero_rank} with nonzero hinge)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
