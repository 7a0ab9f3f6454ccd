"""scikit-learn estimator over ``(drug_id, cell_id)`` rows."""
from __future__ import annotations

from dataclasses import asdict

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_consistent_length, check_is_fitted

from tcrdrp.data.dataset import ResponseRecord
from tcrdrp.evaluation import UndefinedMetric, drug_pcc
from tcrdrp.model import ModelConfig, predict_dataset
from tcrdrp.training import TrainConfig, fit


def _check_pairs(X) -> np.ndarray:
    pairs = np.asarray(X, dtype=object)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError(f"X must be an (n, 2) array of (drug_id, cell_id), got shape {pairs.shape}")
    if len(pairs) == 0:
        raise ValueError("X is empty")
    return pairs


class TCRRegressor(RegressorMixin, BaseEstimator):
    """Predict ln IC50 for drug/cell identifier pairs.

    ``dataset`` supplies the drug graphs and omics profiles; its records are
    ignored; ``X``/``y`` decide what is trained on.
    """

    def __init__(self, dataset=None, model_config=None, beta=0.9, margin=0.0, learning_rate=1e-4,
                 batch_pairs=32, epochs=1, steps=None, rank_pair_axis_mix=0.5, seed=0):
        self.dataset = dataset
        self.model_config = model_config
        self.beta = beta
        self.margin = margin
        self.learning_rate = learning_rate
        self.batch_pairs = batch_pairs
        self.epochs = epochs
        self.steps = steps
        self.rank_pair_axis_mix = rank_pair_axis_mix
        self.seed = seed

    def _records(self, pairs, y=None):
        if self.dataset is None:
            raise ValueError("TCRRegressor needs a dataset providing drugs and cells")
        values = np.zeros(len(pairs)) if y is None else y
        return self.dataset.with_records(
            [ResponseRecord(str(d), str(c), float(v)) for (d, c), v in zip(pairs, values)]
        )

    def _model_config(self) -> ModelConfig:
        mc = self.model_config
        if mc is None:
            return ModelConfig()
        return mc if isinstance(mc, ModelConfig) else ModelConfig(**mc)

    def fit(self, X, y):
        pairs = _check_pairs(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        check_consistent_length(pairs, y)
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
        ds = self._records(pairs, y)
        cfg = TrainConfig(beta=self.beta, margin=self.margin, learning_rate=self.learning_rate,
                          batch_pairs=self.batch_pairs, epochs=self.epochs, steps=self.steps,
                          rank_pair_axis_mix=self.rank_pair_axis_mix, seed=self.seed)
        result = fit(ds, None, self._model_config(), cfg)
        self.params_ = result.params
        self.history_ = list(result.state.history)
        self.config_ = asdict(cfg)
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        pairs = _check_pairs(X)
        return predict_dataset(self.params_, self._records(pairs))


def drug_pcc_scorer(estimator, X, y) -> float:
    """Scorer (``estimator, X, y``) returning held-out DrugPCC; undefined scores give NaN."""
    pairs = _check_pairs(X)
    try:
        return drug_pcc(pairs[:, 0], estimator.predict(pairs), y)[0]
    except UndefinedMetric:
        return float("nan")
