"""The TCR network: GCN drug encoder, omics encoders, atom-omics attention
blocks and a 1D-convolutional prediction head.

Internally a batch is *packed*: only real atom rows are materialized, so
padded positions cost nothing and stay exactly zero. The per-graph functions
(:func:`gcn_forward`, :func:`aoa_attention`, ...) expose the fixed 100-row
padded layout on top of the same code path.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from tcrdrp.core import BatchNormState, Tensor, ops
from tcrdrp.data.graphs import ATOM_FEATURES, MAX_ATOMS, PaddedDrugGraph
from tcrdrp.data.omics import OmicsProfile

OMICS_CHANNELS = ("mutation", "expression", "methylation")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 200
    n_heads: int = 2
    d_k: int = 100
    n_blocks: int = 2
    gcn_widths: tuple = (128, 128, 200)
    omics_hidden: tuple = (256,)
    ff_inner: int = 512
    conv_channels: tuple = (32, 16)
    conv_kernel: int = 3
    conv_stride: int = 2
    dropout_rate: float = 0.1
    pooling: str = "max"
    max_atoms: int = MAX_ATOMS

    def __post_init__(self):
        self.gcn_widths = tuple(int(w) for w in self.gcn_widths)
        self.omics_hidden = tuple(int(w) for w in self.omics_hidden)
        self.conv_channels = tuple(int(w) for w in self.conv_channels)
        if self.d_model != self.d_k * self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must equal d_k * n_heads ({self.d_k} * {self.n_heads})")
        if not self.gcn_widths or self.gcn_widths[-1] != self.d_model:
            raise ValueError("the last GCN width must equal d_model")
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"pooling must be 'max' or 'mean', got {self.pooling!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.head_length() < 1:
            raise ValueError("convolution stack leaves no positions; reduce depth or kernel")

    def head_length(self) -> int:
        length = self.max_atoms + 1
        for _ in self.conv_channels:
            if self.conv_kernel > length:
                return 0
            length = (length - self.conv_kernel) // self.conv_stride + 1
        return length

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        """A narrow configuration for desk-scale experiments."""
        base = dict(
            d_model=32, n_heads=2, d_k=16, n_blocks=2, gcn_widths=(32, 32), omics_hidden=(64,),
            ff_inner=64, conv_channels=(8, 8), dropout_rate=0.1,
        )
        base.update(overrides)
        if "d_model" in overrides and "gcn_widths" not in overrides:
            base["gcn_widths"] = (overrides["d_model"],) * 2
        return cls(**base)


class ModelParams:
    """Named registry of learnable tensors plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, omics_dims: Sequence[int], tensors: dict, bn: dict):
        self.config = config
        self.omics_dims = tuple(int(d) for d in omics_dims)
        self.tensors: dict[str, Tensor] = tensors
        self.bn: dict[str, BatchNormState] = bn

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def paths(self) -> list[str]:
        return list(self.tensors)

    def set(self, path: str, values) -> None:
        self.tensors[path].assign(values)

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        tensors = {p: Tensor(t.values, requires_grad=True) for p, t in self.tensors.items()}
        bn = {
            k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
            for k, s in self.bn.items()
        }
        return ModelParams(self.config, self.omics_dims, tensors, bn)


def init_params(config: ModelConfig, omics_dims: Sequence[int], seed: int = 0) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}

    def weight(path, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        tensors[path] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def const(path, shape, value):
        tensors[path] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    def affine(prefix, n_in, n_out):
        weight(f"{prefix}.weight", (n_in, n_out), n_in)
        const(f"{prefix}.bias", (n_out,), 0.0)

    d = config.d_model
    width = ATOM_FEATURES
    for l, w in enumerate(config.gcn_widths):
        affine(f"gcn.{l}", width, w)
        width = w
    for name, dim in zip(OMICS_CHANNELS, omics_dims):
        width = dim
        for l, w in enumerate(config.omics_hidden):
            affine(f"omics.{name}.{l}", width, w)
            width = w
        affine(f"omics.{name}.{len(config.omics_hidden)}", width, d)
    for b in range(config.n_blocks):
        pre = f"blocks.{b}"
        for i in range(config.n_heads):
            for proj in ("w_q", "w_k", "w_v"):
                weight(f"{pre}.aoa.head{i}.{proj}", (d, config.d_k), d)
        weight(f"{pre}.aoa.w_o", (config.n_heads * config.d_k, d), config.n_heads * config.d_k)
        const(f"{pre}.norm1.gain", (d,), 1.0)
        const(f"{pre}.norm1.bias", (d,), 0.0)
        affine(f"{pre}.ff.0", d, config.ff_inner)
        affine(f"{pre}.ff.1", config.ff_inner, d)
        const(f"{pre}.norm2.gain", (d,), 1.0)
        const(f"{pre}.norm2.bias", (d,), 0.0)
    cin = d
    for i, cout in enumerate(config.conv_channels):
        k = config.conv_kernel
        weight(f"head.conv.{i}.kernel", (cout, cin, k), cin * k)
        const(f"head.bn.{i}.gain", (cout,), 1.0)
        const(f"head.bn.{i}.bias", (cout,), 0.0)
        bn[f"head.bn.{i}"] = BatchNormState.fresh(cout)
        cin = cout
    affine("head.out", cin * config.head_length(), 1)
    return ModelParams(config, omics_dims, tensors, bn)


# -- packed batches -----------------------------------------------------------

@dataclass
class Batch:
    """Packed inputs for a set of (drug, cell) pairs.

    ``feats``/``adj`` hold the real atoms of each unique drug back to back;
    ``rec_drug``/``rec_cell`` map each pair to its unique drug / cell.
    """

    feats: np.ndarray
    adj: sp.csr_matrix
    atom_counts: np.ndarray
    omics: tuple
    rec_drug: np.ndarray
    rec_cell: np.ndarray
    max_atoms: int = MAX_ATOMS
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.rec_drug)

    @property
    def drug_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.atom_counts)])

    def record_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Packed-drug row index of every record atom, and the owning record."""
        if "rows" not in self._cache:
            off = self.drug_offsets
            counts = self.atom_counts[self.rec_drug]
            rows = np.concatenate([np.arange(off[d], off[d] + n) for d, n in zip(self.rec_drug, counts)])
            seg = np.repeat(np.arange(len(self.rec_drug)), counts)
            self._cache["rows"] = (rows, seg)
        return self._cache["rows"]

    def pad_index(self, counts: np.ndarray, zero_row: int) -> np.ndarray:
        """(n, max_atoms) gather index into packed rows, padded slots -> ``zero_row``."""
        idx = np.full((len(counts), self.max_atoms), zero_row, dtype=np.intp)
        start = 0
        for i, n in enumerate(counts):
            idx[i, :n] = np.arange(start, start + n)
            start += n
        return idx

    def pad_mask(self, counts: np.ndarray) -> np.ndarray:
        return np.arange(self.max_atoms)[None, :] < np.asarray(counts)[:, None]


def make_batch(graphs: Sequence, omics: Sequence, rec_drug, rec_cell, max_atoms: int = MAX_ATOMS) -> Batch:
    """Assemble a batch from unique drugs and cells.

    ``graphs`` items are ``(features, norm_adjacency)`` over real atoms only.
    ``omics`` items are :class:`OmicsProfile`.
    """
    counts = np.array([f.shape[0] for f, _ in graphs], dtype=np.intp)
    if counts.size and counts.max() > max_atoms:
        raise ValueError(f"a drug has {counts.max()} atoms, more than {max_atoms}")
    feats = np.vstack([f for f, _ in graphs])
    adj = sp.block_diag([a for _, a in graphs], format="csr")
    channels = tuple(np.vstack([p.channels()[c] for p in omics]) for c in range(3))
    return Batch(feats, adj, counts, channels, np.asarray(rec_drug, np.intp), np.asarray(rec_cell, np.intp),
                 max_atoms)


def dataset_batch(dataset, indices, max_atoms: int = MAX_ATOMS) -> Batch:
    """Batch over records ``indices`` of a :class:`~tcrdrp.data.Dataset`."""
    idx = np.asarray(indices, dtype=np.intp)
    d_u, rec_drug = np.unique(dataset.drug_idx[idx], return_inverse=True)
    c_u, rec_cell = np.unique(dataset.cell_idx[idx], return_inverse=True)
    graphs = [dataset.packed(dataset.drug_ids[i]) for i in d_u]
    omics = [dataset.cells[dataset.cell_ids[i]] for i in c_u]
    return make_batch(graphs, omics, rec_drug, rec_cell, max_atoms)


def _affine(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return ops.bias_add(ops.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def gcn_packed(params: ModelParams, feats, adj) -> Tensor:
    """Stacked propagate-transform-ReLU layers over real atoms."""
    h = Tensor._wrap(feats) if not isinstance(feats, Tensor) else feats
    cfg = params.config
    if h.shape[-1] != params[f"gcn.0.weight"].shape[0]:
        raise ValueError(f"atom features have width {h.shape[-1]}, first GCN layer expects "
                         f"{params['gcn.0.weight'].shape[0]}")
    for l in range(len(cfg.gcn_widths)):
        h = ops.relu(_affine(params, f"gcn.{l}", ops.propagate(adj, h)))
    return h


def omics_tokens(params: ModelParams, channels: Sequence) -> list[Tensor]:
    """One ``(n_cells, d_model)`` token matrix per omics channel."""
    out = []
    n_layers = len(params.config.omics_hidden) + 1
    for name, x, dim in zip(OMICS_CHANNELS, channels, params.omics_dims):
        x = x if isinstance(x, Tensor) else Tensor._wrap(np.atleast_2d(x))
        if x.shape[-1] != dim:
            raise ValueError(f"{name} input has {x.shape[-1]} features, model expects {dim}")
        h = x
        for l in range(n_layers):
            h = _affine(params, f"omics.{name}.{l}", h)
            if l < n_layers - 1:
                h = ops.relu(h)
        out.append(h)
    return out


def _stack_tokens(tokens: Sequence[Tensor]) -> Tensor:
    n, d = tokens[0].shape
    return ops.concat([ops.reshape(t, (n, 1, d)) for t in tokens], axis=1)


def aoa_packed(params: ModelParams, block: int, x: Tensor, omics: Tensor, seg: np.ndarray,
               weights_out: Optional[list] = None) -> Tensor:
    """Atom queries attend over the 3 omics tokens of their own record.

    ``x`` is ``(rows, d_model)``, ``omics`` is ``(records, 3, d_model)`` and
    ``seg[r]`` is the record owning row ``r``.
    """
    cfg = params.config
    pre = f"blocks.{block}.aoa"
    rows = x.shape[0]
    scale = 1.0 / math.sqrt(cfg.d_k)
    heads = []
    for i in range(cfg.n_heads):
        q = ops.matmul(x, params[f"{pre}.head{i}.w_q"])
        k = ops.take(ops.matmul(omics, params[f"{pre}.head{i}.w_k"]), seg, axis=0)
        v = ops.take(ops.matmul(omics, params[f"{pre}.head{i}.w_v"]), seg, axis=0)
        scores = ops.mul_scalar(ops.einsum("rk,rjk->rj", q, k), scale)
        attn = ops.softmax_masked(scores, axis=-1)
        if weights_out is not None:
            weights_out.append(attn.values)
        heads.append(ops.einsum("rj,rjk->rk", attn, v))
    return ops.matmul(ops.concat(heads, axis=1), params[f"{pre}.w_o"])


def block_packed(params: ModelParams, block: int, x: Tensor, omics: Tensor, seg: np.ndarray,
                 weights_out: Optional[list] = None) -> Tensor:
    pre = f"blocks.{block}"
    att = aoa_packed(params, block, x, omics, seg, weights_out)
    x1 = ops.layer_norm(ops.add(x, att), params[f"{pre}.norm1.gain"], params[f"{pre}.norm1.bias"])
    ff = _affine(params, f"{pre}.ff.1", ops.relu(_affine(params, f"{pre}.ff.0", x1)))
    return ops.layer_norm(ops.add(x1, ff), params[f"{pre}.norm2.gain"], params[f"{pre}.norm2.bias"])


def _pad_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather packed rows into a padded ``(n, max_atoms, d)`` tensor of zeros elsewhere."""
    zero = Tensor._wrap(np.zeros((1, x.shape[1])))
    return ops.take(ops.concat([x, zero], axis=0), index, axis=0)


def _pool(params: ModelParams, padded: Tensor, mask: np.ndarray) -> Tensor:
    if params.config.pooling == "max":
        return ops.masked_max(padded, mask, axis=1)
    counts = mask.sum(axis=1, keepdims=True)
    return ops.apply_mask(ops.reduce_sum(padded, axis=1), 1.0 / counts)


def head_forward(params: ModelParams, seq: Tensor, training: bool, rng) -> Tensor:
    """Conv -> batch-norm -> ReLU -> dropout stack, flatten, affine to a scalar."""
    cfg = params.config
    h = seq
    for i in range(len(cfg.conv_channels)):
        h = ops.conv1d(h, params[f"head.conv.{i}.kernel"], stride=cfg.conv_stride)
        h = ops.batch_norm(h, params[f"head.bn.{i}.gain"], params[f"head.bn.{i}.bias"],
                           params.bn[f"head.bn.{i}"], training)
        h = ops.dropout(ops.relu(h), cfg.dropout_rate, rng, training)
    n = h.shape[0]
    flat = ops.reshape(h, (n, h.shape[1] * h.shape[2]))
    return ops.reshape(_affine(params, "head.out", flat), (n,))


def forward(params: ModelParams, batch: Batch, training: bool = False,
            rng: Optional[np.random.Generator] = None, attention_out: Optional[list] = None) -> Tensor:
    """Predicted ln IC50 for every pair in ``batch``."""
    cfg = params.config
    if batch.max_atoms != cfg.max_atoms:
        raise ValueError("batch and model disagree on the atom budget")
    atoms = gcn_packed(params, batch.feats, batch.adj)
    rows, seg = batch.record_rows()
    x = ops.take(atoms, rows, axis=0)
    tokens = _stack_tokens(omics_tokens(params, batch.omics))
    omics = ops.take(tokens, batch.rec_cell, axis=0)
    for b in range(cfg.n_blocks):
        x = block_packed(params, b, x, omics, seg, attention_out)

    drug_pad = _pad_rows(atoms, batch.pad_index(batch.atom_counts, atoms.shape[0]))
    pooled = _pool(params, drug_pad, batch.pad_mask(batch.atom_counts))
    rec_counts = batch.atom_counts[batch.rec_drug]
    inter = _pad_rows(x, batch.pad_index(rec_counts, x.shape[0]))
    n = len(batch)
    seq = ops.concat(
        [ops.transpose(inter, (0, 2, 1)),
         ops.reshape(ops.take(pooled, batch.rec_drug, axis=0), (n, cfg.d_model, 1))],
        axis=2,
    )
    return head_forward(params, seq, training, rng)


def predict_dataset(params: ModelParams, dataset, indices=None, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions for records of a dataset."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.intp)
    out = np.empty(len(idx))
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        out[start:start + len(chunk)] = forward(params, dataset_batch(dataset, chunk, params.config.max_atoms)).values
    return out


# -- per-graph padded API ------------------------------------------------------

def _real(g: PaddedDrugGraph):
    m = g.atom_mask
    return g.atom_features[m], g.norm_adjacency[np.ix_(m, m)]


def _unpad_tokens(atom_tokens, atom_mask) -> Tensor:
    t = atom_tokens if isinstance(atom_tokens, Tensor) else Tensor._wrap(atom_tokens)
    return ops.take(t, np.flatnonzero(atom_mask), axis=0)


def _repad(x: Tensor, atom_mask) -> Tensor:
    n = int(np.sum(atom_mask))
    idx = np.full(len(atom_mask), n, dtype=np.intp)
    idx[np.flatnonzero(atom_mask)] = np.arange(n)
    zero = Tensor._wrap(np.zeros((1, x.shape[1])))
    return ops.take(ops.concat([x, zero], axis=0), idx, axis=0)


def gcn_forward(g: PaddedDrugGraph, params: ModelParams) -> Tensor:
    """Atom states ``(max_atoms, d_model)``; padded rows are exactly zero."""
    feats, adj = _real(g)
    return _repad(gcn_packed(params, feats, adj), g.atom_mask)


def omics_encode(profile: OmicsProfile, params: ModelParams) -> tuple[Tensor, Tensor, Tensor]:
    toks = omics_tokens(params, [c[None, :] for c in profile.channels()])
    return tuple(ops.reshape(t, (t.shape[1],)) for t in toks)


def _omics_matrix(omics_tokens_) -> Tensor:
    if isinstance(omics_tokens_, Tensor):
        return omics_tokens_
    if isinstance(omics_tokens_, (list, tuple)) and isinstance(omics_tokens_[0], Tensor):
        return ops.concat([ops.reshape(t, (1, t.shape[-1])) for t in omics_tokens_], axis=0)
    return Tensor._wrap(np.asarray(omics_tokens_))


def aoa_attention(atom_tokens, omics_tokens_, atom_mask, params: ModelParams, block: int = 0,
                  weights_out: Optional[list] = None) -> Tensor:
    """Atom-omics attention on one drug/cell pair in the padded layout."""
    x = _unpad_tokens(atom_tokens, atom_mask)
    o = ops.reshape(_omics_matrix(omics_tokens_), (1, 3, params.config.d_model))
    seg = np.zeros(x.shape[0], dtype=np.intp)
    return _repad(aoa_packed(params, block, x, o, seg, weights_out), atom_mask)


def transformer_block(atom_tokens, omics_tokens_, atom_mask, params: ModelParams, block: int = 0) -> Tensor:
    x = _unpad_tokens(atom_tokens, atom_mask)
    o = ops.reshape(_omics_matrix(omics_tokens_), (1, 3, params.config.d_model))
    seg = np.zeros(x.shape[0], dtype=np.intp)
    return _repad(block_packed(params, block, x, o, seg), atom_mask)


def global_pool(atom_states, atom_mask, mode: str = "max") -> Tensor:
    x = atom_states if isinstance(atom_states, Tensor) else Tensor._wrap(atom_states)
    mask = np.asarray(atom_mask, dtype=bool)
    if not mask.any():
        raise ValueError("global_pool: no real atoms")
    if mode == "max":
        return ops.masked_max(x, mask, axis=0)
    return ops.apply_mask(ops.reduce_sum(ops.apply_mask(x, mask[:, None]), axis=0), 1.0 / mask.sum())


def predict_ic50(pairs: Sequence[tuple], params: ModelParams, mode: str = "eval",
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Predictions for ``(PaddedDrugGraph, OmicsProfile)`` pairs."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    graphs = [_real(g) for g, _ in pairs]
    omics = [p for _, p in pairs]
    n = len(pairs)
    batch = make_batch(graphs, omics, np.arange(n), np.arange(n), max_atoms=len(pairs[0][0].atom_mask))
    return forward(params, batch, training=(mode == "train"), rng=rng)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, optimizer_state=None) -> None:
    """Write parameters, batch-norm statistics and Adam moments to an ``.npz`` file."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "omics_dims": list(params.omics_dims),
        "step": int(optimizer_state.step) if optimizer_state is not None else 0,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for p, t in params.tensors.items():
        arrays[f"param/{p}"] = t.values
    for name, s in params.bn.items():
        arrays[f"bn/{name}/running_mean"] = s.running_mean
        arrays[f"bn/{name}/running_var"] = s.running_var
    if optimizer_state is not None:
        for p in params.tensors:
            arrays[f"adam_m/{p}"] = optimizer_state.m[p]
            arrays[f"adam_v/{p}"] = optimizer_state.v[p]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(params, moments)``; ``moments`` is ``None`` when absent."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig(**meta["config"])
        params = init_params(cfg, meta["omics_dims"])
        for p in params.paths():
            key = f"param/{p}"
            if key not in z.files:
                raise ValueError(f"{path}: missing parameter {p}")
            arr = z[key]
            if arr.shape != params[p].shape:
                raise ValueError(f"{path}: parameter {p} has shape {arr.shape}, config expects {params[p].shape}")
            params[p].assign(arr)
        for name, s in params.bn.items():
            s.running_mean = z[f"bn/{name}/running_mean"].copy()
            s.running_var = z[f"bn/{name}/running_var"].copy()
        moments = None
        if any(k.startswith("adam_m/") for k in z.files):
            moments = {
                "step": meta["step"],
                "m": {p: z[f"adam_m/{p}"].copy() for p in params.paths()},
                "v": {p: z[f"adam_v/{p}"].copy() for p in params.paths()},
            }
    return params, moments
