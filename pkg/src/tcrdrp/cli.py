"""Command-line entry point: ``tcrdrp {synth,train,evaluate,predict,sweep-beta,ablate}``.

Configuration is an INI file with sections ``data``, ``synth``, ``model``,
``train``, ``split`` and ``run``; unknown sections or keys are errors. A
``manifest.json`` written by any command is also accepted as ``--config``,
which replays that run.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from tcrdrp.data import SynthConfig, load_dataset, make_split, read_responses, synth_generate, synth_raw
from tcrdrp.data.dataset import Dataset, ResponseRecord
from tcrdrp.data.io import write_drugs, write_omics, write_responses
from tcrdrp.data.omics import OmicsProfile
from tcrdrp.data.splits import SplitPlan
from tcrdrp.evaluation import cross_validate, metric_report, onehot_ablation, write_scatter
from tcrdrp.model import ModelConfig, load_checkpoint, predict_dataset, save_checkpoint
from tcrdrp.training import TrainConfig, derive_seed, fit, write_history

log = logging.getLogger("tcrdrp")

BETA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------

def _defaults() -> dict:
    train = asdict(TrainConfig())
    del train["seed"]  # per-fold seeds derive from run.seed
    return {
        "data": {"drugs": None, "omics": None, "responses": None},
        "synth": {k: v for k, v in asdict(SynthConfig()).items() if k != "seed"},
        "model": asdict(ModelConfig()),
        "train": train,
        "split": {"mode": "random", "k": 5, "seed": None, "plan": None},
        "run": {"seed": 0, "folds": None, "betas": list(BETA_GRID), "ablate_mode": "onehot",
                "universe": "all", "min_samples": 2, "eval_on": "test"},
    }


# keys whose default is None (or a list) need an explicit parser
_TYPED = {
    ("data", "drugs"): str, ("data", "omics"): str, ("data", "responses"): str,
    ("train", "steps"): int, ("train", "stop_at_train_mse"): float,
    ("split", "seed"): int, ("split", "plan"): str,
    ("run", "folds"): "ints", ("run", "betas"): "floats",
}


def _parse_list(text: str, kind):
    items = [t.strip() for t in str(text).replace("[", "").replace("]", "").split(",") if t.strip()]
    return [kind(t) for t in items]


def _coerce(section: str, key: str, raw, default):
    """Convert an INI string (or a JSON value from a manifest) to the field's type."""
    if isinstance(raw, str) and raw.strip().lower() in ("none", "null", ""):
        return None
    typ = _TYPED.get((section, key))
    try:
        if typ == "ints":
            return raw if raw is None else (list(raw) if isinstance(raw, list) else _parse_list(raw, int))
        if typ == "floats":
            return [float(v) for v in raw] if isinstance(raw, list) else _parse_list(raw, float)
        if typ is not None:
            return None if raw is None else typ(raw)
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(raw) if isinstance(raw, list) else tuple(_parse_list(raw, int))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def _merge(cfg: dict, updates: dict, origin: str) -> None:
    for section, values in updates.items():
        if section not in cfg:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        for key, raw in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
            cfg[section][key] = _coerce(section, key, raw, cfg[section][key])


def load_config(path: Optional[str]) -> dict:
    cfg = _defaults()
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        _merge(cfg, obj.get("config", obj), path)
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    _merge(cfg, {s: dict(parser.items(s)) for s in parser.sections()}, path)
    return cfg


def _jsonable(cfg: dict) -> dict:
    return json.loads(json.dumps(cfg, default=list))


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


# -- outputs ----------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Staging:
    """Write into a temporary sibling directory; rename onto ``out`` only on success."""

    def __init__(self, out: str, force: bool = False):
        self.out = Path(out)
        if self.out.exists() and any(self.out.iterdir()) and not force:
            raise FileExistsError(f"output directory {self.out} is not empty (use --force to replace it)")
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.path: Optional[Path] = None

    def __enter__(self) -> Path:
        self.path = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.tmp-", dir=self.out.parent))
        return self.path

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            shutil.rmtree(self.path, ignore_errors=True)
            return
        if self.out.exists():
            shutil.rmtree(self.out)
        os.replace(self.path, self.out)


def write_manifest(root: Path, command: str, cfg: dict, extra: Optional[dict] = None) -> None:
    artifacts = {
        str(p.relative_to(root)): _sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }
    obj = {"tool": "tcrdrp", "command": command, "seed": cfg["run"]["seed"], "config": _jsonable(cfg),
           "artifacts": artifacts}
    if extra:
        obj.update(extra)
    (root / MANIFEST).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- shared plumbing -------------------------------------------------------------------

def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(seed=cfg["run"]["seed"], **cfg["synth"])


def resolve_dataset(cfg: dict) -> Dataset:
    paths = [cfg["data"][k] for k in ("drugs", "omics", "responses")]
    if any(paths):
        if not all(paths):
            raise ConfigError("[data] needs drugs, omics and responses together")
        ds = load_dataset(*paths)
        if ds.report.dropped:
            log.warning("dropped %d records with unknown drug or cell", ds.report.dropped)
        return ds
    sc = synth_config(cfg)
    return synth_generate(sc.n_drugs, sc.n_cells, sc.dims, sc.noise_sd, sc.seed,
                          **{k: v for k, v in asdict(sc).items()
                             if k not in ("n_drugs", "n_cells", "dims", "noise_sd", "seed")})


def resolve_plan(cfg: dict, ds: Dataset) -> SplitPlan:
    sp = cfg["split"]
    if sp["plan"]:
        return SplitPlan.from_json(sp["plan"])
    seed = cfg["run"]["seed"] if sp["seed"] is None else sp["seed"]
    return make_split(ds, sp["mode"], sp["k"], seed)


def resolve_folds(cfg: dict, plan: SplitPlan) -> list:
    folds = cfg["run"]["folds"]
    folds = list(range(plan.k)) if folds is None else list(folds)
    bad = [f for f in folds if not 0 <= f < plan.k]
    if bad:
        raise ConfigError(f"folds {bad} out of range for a {plan.k}-fold plan")
    return folds


def _report(ds: Dataset, idx, pred, min_samples: int):
    return metric_report(ds.record_drug_ids()[idx], ds.record_cell_ids()[idx], pred, ds.y[idx], min_samples)


# -- commands ------------------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path) -> None:
    drugs, raw, records, _ = synth_raw(synth_config(cfg))
    write_drugs(out / "drugs.jsonl", drugs)
    write_omics(out / "omics.jsonl", raw, expression_normalized=False)
    write_responses(out / "responses.csv", records)
    log.info("wrote %d drugs, %d cells, %d responses", len(drugs), len(raw), len(records))


def cmd_train(cfg: dict, out: Path) -> None:
    ds = resolve_dataset(cfg)
    plan = resolve_plan(cfg, ds)
    folds = resolve_folds(cfg, plan)
    mc, tc = model_config(cfg), train_config(cfg)
    plan.to_json(out / "split_plan.json")
    for f in folds:
        seed = derive_seed(cfg["run"]["seed"], f)
        result = fit(ds, plan.train_indices(ds, f), mc, replace(tc, seed=seed))
        fold_dir = out / f"fold{f}"
        fold_dir.mkdir()
        save_checkpoint(fold_dir / "checkpoint.npz", result.params, result.state.adam)
        write_history(fold_dir / "loss_history.csv", result.state.history)
        log.info("fold %d: %d steps, final loss %s", f, result.state.step,
                 result.state.history[-1][1] if result.state.history else "n/a")


def _fold_dirs(run: Path) -> list:
    dirs = sorted((p for p in run.glob("fold*") if (p / "checkpoint.npz").exists()),
                  key=lambda p: int(p.name[4:]))
    if not dirs:
        raise FileNotFoundError(f"no fold*/checkpoint.npz under {run}")
    return dirs


def evaluate_run(run: Path, on: str = "test", min_samples: int = 2):
    """Per-fold and pooled reports for a training run directory."""
    manifest = run / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"run manifest not found: {manifest}")
    cfg = load_config(str(manifest))
    ds = resolve_dataset(cfg)
    plan = SplitPlan.from_json(run / "split_plan.json")
    expected = model_config(cfg)
    folds, idx_all, pred_all = [], [], []
    for d in _fold_dirs(run):
        f = int(d.name[4:])
        params, _ = load_checkpoint(d / "checkpoint.npz")
        if params.config != expected:
            raise ConfigError(f"{d / 'checkpoint.npz'}: model config differs from the run manifest")
        if params.omics_dims != tuple(ds.omics_dims):
            raise ConfigError(f"{d / 'checkpoint.npz'}: trained on omics dims {params.omics_dims}, "
                              f"dataset has {tuple(ds.omics_dims)}")
        idx = plan.test_indices(ds, f) if on == "test" else plan.train_indices(ds, f)
        pred = predict_dataset(params, ds, idx)
        folds.append((f, _report(ds, idx, pred, min_samples)))
        idx_all.append(idx)
        pred_all.append(pred)
    idx, pred = np.concatenate(idx_all), np.concatenate(pred_all)
    return folds, _report(ds, idx, pred, min_samples)


def cmd_evaluate(cfg: dict, out: Path, run: str, compare: Optional[str] = None) -> None:
    on, ms = cfg["run"]["eval_on"], cfg["run"]["min_samples"]
    if on not in ("test", "train"):
        raise ConfigError("[run] eval_on must be 'test' or 'train'")
    folds, pooled = evaluate_run(Path(run), on, ms)
    for f, rep in folds:
        rep.write(out / f"fold{f}")
    pooled.write(out)
    if compare:
        _, other = evaluate_run(Path(compare), on, ms)
        write_scatter(out / "scatter.csv", pooled.per_drug, other.per_drug)
    log.info("pooled: %s", pooled.headline())


def cmd_predict(cfg: dict, out: Path, checkpoint: str, input_path: str) -> None:
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    if not os.path.exists(input_path):
        raise FileNotFoundError(f"input file not found: {input_path}")
    ds = resolve_dataset(cfg)
    params, _ = load_checkpoint(checkpoint)
    if params.omics_dims != tuple(ds.omics_dims):
        raise ConfigError(f"{checkpoint}: omics dims {params.omics_dims} differ from the dataset's")
    rows = read_responses(input_path, require_value=False)
    for lineno, (d, c, _) in enumerate(rows, start=2):
        if d not in ds.drugs or c not in ds.cells:
            raise KeyError(f"{input_path}:{lineno}: unknown drug or cell ({d}, {c})")
    query = ds.with_records([ResponseRecord(d, c, 0.0) for d, c, _ in rows])
    pred = predict_dataset(params, query) if rows else np.empty(0)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["drug_id", "cell_id", "predicted"])
        for (d, c, _), p in zip(rows, pred):
            w.writerow([d, c, repr(float(p))])


def cmd_sweep_beta(cfg: dict, out: Path) -> None:
    betas = cfg["run"]["betas"]
    if not betas or any(not 0.0 <= b <= 1.0 for b in betas):
        raise ConfigError("[run] betas must be a non-empty list of values in [0, 1]")
    ds = resolve_dataset(cfg)
    plan = resolve_plan(cfg, ds)
    folds = resolve_folds(cfg, plan)
    mc, tc = model_config(cfg), train_config(cfg)
    root = cfg["run"]["seed"]
    rows = []
    for i, beta in enumerate(betas):
        idx_all, pred_all = [], []
        for f in folds:
            result = fit(ds, plan.train_indices(ds, f), mc, replace(tc, beta=beta, seed=derive_seed(root, f, i)))
            point = out / f"beta{i}" / f"fold{f}"
            point.mkdir(parents=True)
            write_history(point / "loss_history.csv", result.state.history)
            te = plan.test_indices(ds, f)
            idx_all.append(te)
            pred_all.append(predict_dataset(result.params, ds, te))
        rep = _report(ds, np.concatenate(idx_all), np.concatenate(pred_all), cfg["run"]["min_samples"])
        rows.append((beta, rep.drug_pcc, rep.overall_pcc, rep.scc, rep.rmse))
        log.info("beta=%s drug_pcc=%s", beta, rep.drug_pcc)
    _write_rows(out / "sweep.csv", ["beta", "drug_pcc", "pcc", "scc", "rmse"], rows)


def _zero_channels(ds: Dataset, keep: int) -> list:
    out = []
    for c in ds.cells.values():
        ch = [v if i == keep else np.zeros_like(v) for i, v in enumerate(c.channels())]
        out.append(OmicsProfile(c.cell_id, *ch))
    return out


def cmd_ablate(cfg: dict, out: Path) -> None:
    mode = cfg["run"]["ablate_mode"]
    if mode not in ("onehot", "single_omics"):
        raise ConfigError("[run] ablate_mode must be 'onehot' or 'single_omics'")
    ds = resolve_dataset(cfg)
    mc, tc = model_config(cfg), train_config(cfg)
    seed = cfg["run"]["seed"]
    header = ["setting", "pcc", "drug_pcc", "scc", "rmse", "folds", "seed"]
    rows = []
    if mode == "onehot":
        k = cfg["split"]["k"]
        plan = make_split(ds, "leave_cell", k, seed if cfg["split"]["seed"] is None else cfg["split"]["seed"])
        folds = resolve_folds(cfg, plan)
        base, _, _, _ = cross_validate(ds, plan, folds, mc, tc, seed)
        rows.append(("omics", base.overall_pcc, base.drug_pcc, base.scc, base.rmse, len(folds), seed))
        res = onehot_ablation(ds, mc, tc, k=k, folds=folds, seed=plan.seed, universe=cfg["run"]["universe"])
        r = res.onehot
        rows.append(("onehot", r.overall_pcc, r.drug_pcc, r.scc, r.rmse, len(folds), seed))
        r.write(out, prefix="onehot_")
    else:
        plan = resolve_plan(cfg, ds)
        folds = resolve_folds(cfg, plan)
        settings = [("multi_omics", ds)] + [
            (f"{name}_only", ds.with_cells(_zero_channels(ds, i)))
            for i, name in enumerate(("mutation", "expression", "methylation"))
        ]
        for name, variant in settings:
            rep, _, _, _ = cross_validate(variant, plan, folds, mc, tc, seed)
            rows.append((name, rep.overall_pcc, rep.drug_pcc, rep.scc, rep.rmse, len(folds), seed))
    _write_rows(out / "ablation.csv", header, rows)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])


# -- argument parsing ---------------------------------------------------------------

def _folds_arg(text: str):
    if text.strip().lower() == "all":
        return None
    try:
        return _parse_list(text, int)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--folds expects 'all' or a comma list of integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config or a manifest.json to replay")
    common.add_argument("--out", required=True, help="output directory (written atomically)")
    common.add_argument("--seed", type=int, help="root seed; overrides [run] seed")
    common.add_argument("--folds", type=_folds_arg, help="'all' or comma list of fold indices")
    common.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tcrdrp", description="TCR drug response model")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train per fold, write checkpoints")
    ev = sub.add_parser("evaluate", parents=[common], help="metric reports for a training run")
    ev.add_argument("--run", required=True, help="output directory of a train command")
    ev.add_argument("--compare", help="second run directory for the per-drug scatter export")
    ev.add_argument("--on", choices=("test", "train"), help="which side of each fold to score")
    pr = sub.add_parser("predict", parents=[common], help="predict ln IC50 for listed pairs")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help="CSV with drug_id,cell_id")
    sw = sub.add_parser("sweep-beta", parents=[common], help="train one model per loss mix beta")
    sw.add_argument("--betas", help="comma list; default 0.1,...,1.0")
    ab = sub.add_parser("ablate", parents=[common], help="one-hot or single-omics ablation")
    ab.add_argument("--mode", choices=("onehot", "single_omics"))
    return p


def run(argv=None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.folds is not None:
        cfg["run"]["folds"] = args.folds
    if getattr(args, "betas", None):
        cfg["run"]["betas"] = _parse_list(args.betas, float)
    if getattr(args, "mode", None):
        cfg["run"]["ablate_mode"] = args.mode
    if getattr(args, "on", None):
        cfg["run"]["eval_on"] = args.on
    # validate model/train sections before any work
    model_config(cfg)
    train_config(cfg)
    for key in ("drugs", "omics", "responses"):
        path = cfg["data"][key]
        if path and not os.path.exists(path):
            raise FileNotFoundError(f"{key} file not found: {path}")

    extra = {}
    with Staging(args.out, args.force) as tmp:
        if args.command == "synth":
            cmd_synth(cfg, tmp)
        elif args.command == "train":
            cmd_train(cfg, tmp)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, tmp, args.run, args.compare)
            extra = {"run": os.path.abspath(args.run)}
        elif args.command == "predict":
            cmd_predict(cfg, tmp, args.checkpoint, args.input)
            extra = {"checkpoint": os.path.abspath(args.checkpoint), "input": os.path.abspath(args.input)}
        elif args.command == "sweep-beta":
            cmd_sweep_beta(cfg, tmp)
        else:
            cmd_ablate(cfg, tmp)
        write_manifest(tmp, args.command, cfg, extra)


def main(argv=None) -> int:
    try:
        run(argv)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"tcrdrp: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
