"""Seeded synthetic drug-response data with GDSC/CCLE-shaped inputs.

Each drug and cell gets a latent vector. Responses follow a bilinear-plus-offset
model, ``ln_ic50 = <z_drug, z_cell> / sqrt(L) + offset_drug + noise``, so drugs
have distinct means (overall PCC and DrugPCC can disagree) while the
within-drug ordering still depends on the cell.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from tcrdrp.data.dataset import Dataset, ResponseRecord
from tcrdrp.data.graphs import ATOM_FEATURES, DrugGraph
from tcrdrp.data.omics import RawProfile, preprocess_omics

# Dimensions of the real GDSC/CCLE inputs (mutation positions, expression
# genes, methylation promoters); synthetic runs usually shrink them.
REAL_DATA_DIMS = (34673, 697, 697)

N_ATOM_TYPES = 10
MAX_DEGREE = 6
_EMBED_DIMS = ATOM_FEATURES - N_ATOM_TYPES - MAX_DEGREE


@dataclass
class SynthConfig:
    n_drugs: int = 12
    n_cells: int = 16
    dims: tuple = (64, 32, 32)
    noise_sd: float = 0.1
    seed: int = 0
    latent_dim: int = 4
    offset_sd: float = 2.0
    offset_mean: float = 2.0
    min_atoms: int = 5
    max_atoms: int = 40
    missing_rate: float = 0.02


def _random_molecule(rng, n_atoms: int) -> np.ndarray:
    """Connected tree with valence <= 4 plus a few ring closures."""
    adj = np.zeros((n_atoms, n_atoms), dtype=bool)
    deg = np.zeros(n_atoms, dtype=int)
    for i in range(1, n_atoms):
        open_ = np.flatnonzero(deg[:i] < 4)
        j = rng.choice(open_)
        adj[i, j] = adj[j, i] = True
        deg[i] += 1
        deg[j] += 1
    for _ in range(rng.integers(0, n_atoms // 6 + 1)):
        i, j = rng.choice(n_atoms, size=2, replace=False)
        if not adj[i, j] and deg[i] < 4 and deg[j] < 4:
            adj[i, j] = adj[j, i] = True
            deg[i] += 1
            deg[j] += 1
    return adj


def _drug_features(rng, latent, adj, type_proj, embed_proj) -> np.ndarray:
    n = adj.shape[0]
    logits = type_proj @ latent
    p = np.exp(logits - logits.max())
    types = rng.choice(N_ATOM_TYPES, size=n, p=p / p.sum())
    feats = np.zeros((n, ATOM_FEATURES))
    feats[np.arange(n), types] = 1.0
    deg = np.minimum(adj.sum(axis=1), MAX_DEGREE - 1)
    feats[np.arange(n), N_ATOM_TYPES + deg] = 1.0
    feats[:, N_ATOM_TYPES + MAX_DEGREE:] = embed_proj @ latent + 0.2 * rng.normal(size=(n, _EMBED_DIMS))
    return feats


def synth_raw(cfg: SynthConfig, cell_latents: Optional[np.ndarray] = None):
    """Draw drugs, raw (unprocessed) omics, records and latents."""
    if cfg.n_drugs < 1 or cfg.n_cells < 1 or cfg.latent_dim < 1 or min(cfg.dims) < 1:
        raise ValueError("synthetic counts and dimensions must be positive")
    if cfg.noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    if not 1 <= cfg.min_atoms <= cfg.max_atoms <= 100:
        raise ValueError("atom range must satisfy 1 <= min_atoms <= max_atoms <= 100")
    ss = np.random.SeedSequence(cfg.seed)
    r_proj, r_drug, r_cell, r_noise = (np.random.default_rng(s) for s in ss.spawn(4))
    L = cfg.latent_dim
    d_mut, d_expr, d_meth = cfg.dims

    type_proj = r_proj.normal(size=(N_ATOM_TYPES, L))
    embed_proj = r_proj.normal(size=(_EMBED_DIMS, L)) / np.sqrt(L)
    mut_proj = r_proj.normal(size=(d_mut, L)) / np.sqrt(L)
    expr_proj = r_proj.normal(size=(d_expr, L)) / np.sqrt(L)
    meth_proj = r_proj.normal(size=(d_meth, L)) / np.sqrt(L)

    z_drug = r_drug.normal(size=(cfg.n_drugs, L))
    offsets = cfg.offset_mean + cfg.offset_sd * r_drug.normal(size=cfg.n_drugs)
    drugs = []
    for i in range(cfg.n_drugs):
        n_atoms = int(r_drug.integers(cfg.min_atoms, cfg.max_atoms + 1))
        adj = _random_molecule(r_drug, n_atoms)
        feats = _drug_features(r_drug, z_drug[i], adj, type_proj, embed_proj)
        drugs.append(DrugGraph(f"D{i:03d}", feats, adj))

    if cell_latents is None:
        z_cell = r_cell.normal(size=(cfg.n_cells, L))
    else:
        z_cell = np.asarray(cell_latents, dtype=np.float64)
        if z_cell.shape != (cfg.n_cells, L):
            raise ValueError(f"cell_latents must be ({cfg.n_cells}, {L})")
    raw = []
    for c in range(cfg.n_cells):
        z = z_cell[c]
        mutation = (mut_proj @ z + 0.3 * r_cell.normal(size=d_mut) > 0.8).astype(float)
        expression = np.exp2(5.0 + 2.0 * (expr_proj @ z) + 0.2 * r_cell.normal(size=d_expr))
        methylation = 1.0 / (1.0 + np.exp(-(meth_proj @ z + 0.2 * r_cell.normal(size=d_meth))))
        raw.append(RawProfile(f"C{c:03d}", mutation, expression, methylation))
    if cfg.missing_rate > 0 and cfg.n_cells > 1:
        for j in range(d_meth):
            holes = r_cell.random(cfg.n_cells) < cfg.missing_rate
            holes[r_cell.integers(cfg.n_cells)] = False
            for c in np.flatnonzero(holes):
                raw[c].methylation[j] = np.nan

    signal = z_drug @ z_cell.T / np.sqrt(L) + offsets[:, None]
    y = signal + cfg.noise_sd * r_noise.normal(size=signal.shape)
    records = [
        ResponseRecord(drugs[i].drug_id, raw[c].cell_id, float(y[i, c]))
        for i in range(cfg.n_drugs)
        for c in range(cfg.n_cells)
    ]
    latents = {"drug": z_drug, "cell": z_cell, "offset": offsets}
    return drugs, raw, records, latents


def synth_generate(
    n_drugs: int = 12,
    n_cells: int = 16,
    dims: tuple = (64, 32, 32),
    noise_sd: float = 0.1,
    seed: int = 0,
    cell_latents: Optional[np.ndarray] = None,
    **kwargs,
) -> Dataset:
    """Generate a fully crossed, preprocessed synthetic :class:`Dataset`."""
    cfg = SynthConfig(n_drugs=n_drugs, n_cells=n_cells, dims=tuple(dims), noise_sd=noise_sd, seed=seed, **kwargs)
    drugs, raw, records, latents = synth_raw(cfg, cell_latents)
    return Dataset(drugs, preprocess_omics(raw), records, latents=latents)
