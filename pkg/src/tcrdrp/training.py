"""Dual MSE + ranking objective, cross-sampled pair batches and Adam."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from tcrdrp.core import Tape, Tensor, ops
from tcrdrp.model import ModelConfig, ModelParams, dataset_batch, forward, init_params, predict_dataset

AXES = ("drug", "cell")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass
class TrainConfig:
    beta: float = 0.9
    margin: float = 0.0
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_pairs: int = 32
    epochs: int = 1
    seed: int = 0
    rank_pair_axis_mix: float = 0.5
    # fixed step budget; overrides epochs when set
    steps: Optional[int] = None
    # stop once eval-mode MSE over the whole train fold falls below this
    stop_at_train_mse: Optional[float] = None
    check_every: int = 25

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if not 0.0 <= self.rank_pair_axis_mix <= 1.0:
            raise ValueError("rank_pair_axis_mix must lie in [0, 1]")
        if self.batch_pairs < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_pairs >= 1, epochs >= 0 and learning_rate > 0 are required")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be non-negative")


# -- losses ---------------------------------------------------------------------

def rank_label(y_i, y_j):
    """+1 where ``y_i - y_j > 0``, else -1 (ties included)."""
    out = np.where(np.asarray(y_i, dtype=np.float64) - np.asarray(y_j, dtype=np.float64) > 0, 1, -1)
    return int(out) if out.ndim == 0 else out


def rank_loss(pred_1, pred_2, label, margin: float = 0.0):
    """Hinge ``max(0, -label * (pred_1 - pred_2) + margin)`` on plain numbers."""
    lab = np.asarray(label)
    if not np.all(np.isin(lab, (-1, 1))):
        raise ValueError("rank_loss: label must be +1 or -1")
    out = np.maximum(0.0, -lab * (np.asarray(pred_1, float) - np.asarray(pred_2, float)) + margin)
    return float(out) if out.ndim == 0 else out


def combined_loss(predictions: Tensor, truths, pairs, beta: float, margin: float = 0.0):
    """``(total, mse_part, rank_part)`` with ``total = beta * mse + (1 - beta) * rank``.

    ``pairs`` is an ``(P, 2)`` array of indices into ``predictions``.
    """
    y = np.asarray(truths, dtype=np.float64)
    n = predictions.shape[0] if predictions.ndim else 0
    if n == 0:
        raise ValueError("combined_loss: empty batch")
    if y.shape != (n,):
        raise ValueError(f"combined_loss: {n} predictions but truths have shape {y.shape}")
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise IndexError("combined_loss: pair index out of range")
    mse = ops.reduce_mean(ops.square(ops.sub(predictions, Tensor._wrap(y))))
    if len(pairs):
        labels = rank_label(y[pairs[:, 0]], y[pairs[:, 1]]).astype(np.float64)
        gap = ops.sub(ops.take(predictions, pairs[:, 0]), ops.take(predictions, pairs[:, 1]))
        hinge = ops.relu(ops.add(ops.apply_mask(gap, -labels), float(margin)))
        rank = ops.reduce_mean(hinge)
    else:
        rank = Tensor._wrap(np.array(0.0))
    total = ops.add(ops.mul_scalar(mse, beta), ops.mul_scalar(rank, 1.0 - beta))
    return total, mse, rank


# -- pair sampling ------------------------------------------------------------------

@dataclass
class PairBatch:
    anchors: np.ndarray
    partners: np.ndarray
    axes: list
    records: np.ndarray
    pair_index: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)


class PairSampler:
    """Draws anchor/partner pairs sharing a drug or a cell among ``indices``."""

    def __init__(self, dataset, indices=None):
        self.indices = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.intp)
        self._drug = dataset.drug_idx[self.indices]
        self._cell = dataset.cell_idx[self.indices]
        self._groups = {}
        for axis, keys in (("drug", self._drug), ("cell", self._cell)):
            order = np.argsort(keys, kind="stable")
            uniq, starts = np.unique(keys[order], return_index=True)
            bounds = np.append(starts, len(order))
            self._groups[axis] = {k: order[bounds[i]:bounds[i + 1]] for i, k in enumerate(uniq)}
        has = lambda axis, keys: np.array([len(self._groups[axis][k]) > 1 for k in keys], dtype=bool)
        self.eligible = np.flatnonzero(has("drug", self._drug) | has("cell", self._cell))
        if len(self.eligible) == 0:
            raise ValueError("no record shares a drug or a cell with another record")

    def _members(self, axis: str, pos: int) -> np.ndarray:
        key = self._drug[pos] if axis == "drug" else self._cell[pos]
        return self._groups[axis][key]

    def sample(self, rng: np.random.Generator, config: TrainConfig) -> PairBatch:
        anchors, partners, axes = [], [], []
        for _ in range(config.batch_pairs):
            a = int(self.eligible[rng.integers(len(self.eligible))])
            axis = "drug" if rng.random() < config.rank_pair_axis_mix else "cell"
            group = self._members(axis, a)
            if len(group) < 2:
                axis = "cell" if axis == "drug" else "drug"
                group = self._members(axis, a)
            j = int(rng.integers(len(group) - 1))
            others = group[group != a]
            anchors.append(a)
            partners.append(int(others[j]))
            axes.append(axis)
        local = np.array([anchors, partners], dtype=np.intp).T
        uniq, inverse = np.unique(local, return_inverse=True)
        return PairBatch(
            anchors=self.indices[local[:, 0]],
            partners=self.indices[local[:, 1]],
            axes=axes,
            records=self.indices[uniq],
            pair_index=inverse.reshape(-1, 2),
        )


def cross_sample_batch(dataset, rng: np.random.Generator, config: TrainConfig, indices=None) -> PairBatch:
    return PairSampler(dataset, indices).sample(rng, config)


# -- optimizer ------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(0, {p: np.zeros(t.shape) for p, t in params.tensors.items()},
                   {p: np.zeros(t.shape) for p, t in params.tensors.items()})


def adam_step(params: ModelParams, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, applied in place."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.step + 1
    for path, tensor in params.tensors.items():
        g = np.asarray(grads[path], dtype=np.float64)
        if g.shape != tensor.shape:
            raise ValueError(f"adam_step: gradient for {path} has shape {g.shape}, expected {tensor.shape}")
        m = b1 * state.m[path] + (1 - b1) * g
        v = b2 * state.v[path] + (1 - b2) * g * g
        state.m[path], state.v[path] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        tensor.assign(tensor.values - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps))
    state.step = t


# -- training loop ----------------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    adam: AdamState
    rng: np.random.Generator
    history: list = field(default_factory=list)

    def history_array(self) -> np.ndarray:
        return np.array([h[1:] for h in self.history], dtype=np.float64).reshape(-1, 3)


@dataclass
class FitResult:
    params: ModelParams
    state: TrainState
    train_indices: np.ndarray
    stopped_early: bool = False
    final_train_mse: Optional[float] = None


def derive_seed(root: int, *keys: int) -> int:
    """Child seed for ``keys`` (e.g. fold, sweep point); adding siblings never shifts it."""
    return int(np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys)).generate_state(1)[0])


def steps_for(n_train: int, config: TrainConfig) -> int:
    if config.steps is not None:
        return config.steps
    return config.epochs * math.ceil(n_train / (2 * config.batch_pairs))


def train_step(params: ModelParams, dataset, pairs: PairBatch, state: TrainState, config: TrainConfig):
    batch = dataset_batch(dataset, pairs.records, params.config.max_atoms)
    try:
        with Tape() as tape:
            pred = forward(params, batch, training=True, rng=state.rng)
            total, mse, rank = combined_loss(pred, dataset.y[pairs.records], pairs.pair_index,
                                             config.beta, config.margin)
    except FloatingPointError as exc:
        raise TrainingDiverged(state.step + 1, str(exc)) from exc
    if not math.isfinite(total.item()):
        raise TrainingDiverged(state.step + 1, "non-finite loss")
    grads = tape.backward(total)
    adam_step(params, {p: grads[t] for p, t in params.tensors.items()}, state.adam, config)
    state.step += 1
    state.history.append((state.step, total.item(), mse.item(), rank.item()))
    return total.item()


def fit(
    dataset,
    train_indices=None,
    model_config: Optional[ModelConfig] = None,
    config: Optional[TrainConfig] = None,
    params: Optional[ModelParams] = None,
    callback: Optional[Callable[[TrainState], None]] = None,
) -> FitResult:
    """Train on ``train_indices`` (all records by default).

    Deterministic given ``config.seed``: one child seed initializes the
    weights, another drives pair sampling and dropout.
    """
    config = config or TrainConfig()
    model_config = model_config or ModelConfig()
    idx = np.arange(len(dataset)) if train_indices is None else np.asarray(train_indices, dtype=np.intp)
    if len(idx) == 0:
        raise ValueError("fit: empty training fold")
    init_seq, loop_seq = np.random.SeedSequence(config.seed).spawn(2)
    if params is None:
        params = init_params(model_config, dataset.omics_dims, seed=int(init_seq.generate_state(1)[0]))
    state = TrainState(0, AdamState.zeros_like(params), np.random.default_rng(loop_seq))
    n_steps = steps_for(len(idx), config)
    result = FitResult(params, state, idx)
    if n_steps == 0:
        return result
    sampler = PairSampler(dataset, idx)
    for _ in range(n_steps):
        train_step(params, dataset, sampler.sample(state.rng, config), state, config)
        if callback is not None:
            callback(state)
        if config.stop_at_train_mse is not None and state.step % config.check_every == 0:
            mse = train_mse(params, dataset, idx)
            result.final_train_mse = mse
            if mse < config.stop_at_train_mse:
                result.stopped_early = True
                break
    return result


def train_mse(params: ModelParams, dataset, indices=None) -> float:
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.intp)
    return float(np.mean((predict_dataset(params, dataset, idx) - dataset.y[idx]) ** 2))


def write_history(path, history: Sequence) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "total", "mse", "rank"])
        for step, total, mse, rank in history:
            w.writerow([step, repr(total), repr(mse), repr(rank)])


def read_history(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["total"]), float(r["mse"]), float(r["rank"])) for r in rows]
