"""scikit-learn style wrappers around training and reconstruction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_pairs
from .compat import CompatConfig
from .docproc import ReconstructionInstance
from .metrics import accuracy
from .pipeline import SolverConfig, reconstruct
from .projector import ProjectorPair, embed_sample
from .sampling import SampleDataset, split_train_val
from .trainer import TrainConfig, smd, train


class PairEmbedder(BaseEstimator, TransformerMixin):
    """Learns the two boundary projections from labeled sample pairs.

    ``X`` has shape ``(N, 2, s_y, s_x)`` with the r-sample in channel 0 and
    the l-sample in channel 1; ``y`` is 1 for true neighbors.  ``groups``
    (source document per pair) enables a document-level validation split.
    """

    def __init__(self, d=128, epochs=100, lr=0.1, batch=256, margin=1.0,
                 val_docs=1, seed=0):
        self.d = d
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.margin = margin
        self.val_docs = val_docs
        self.seed = seed

    def fit(self, X, y, groups=None, validation=None):
        X, y = check_pairs(X, y)
        s_y, s_x = X.shape[2:]
        docs = [str(g) for g in groups] if groups is not None else ["doc"] * len(y)
        data = SampleDataset(X, y.astype(np.uint8), docs)
        if validation is None:
            train_ds, val_ds = split_train_val(data, self.val_docs, seed=self.seed)
        else:
            train_ds, val_ds = data, validation
        cfg = TrainConfig(epochs=self.epochs, lr=self.lr, batch=self.batch, margin=self.margin,
                          seed=self.seed, d=self.d, s_y=s_y, s_x=s_x)
        self.projector_, self.records_ = train(train_ds, val_ds, cfg)
        return self

    @classmethod
    def from_projector(cls, pair: ProjectorPair, **params):
        est = cls(d=pair.d, **params)
        est.projector_ = pair
        est.records_ = []
        return est

    def transform(self, X):
        """``(N, 2, d)``: right-network embedding of x_r, left-network embedding of x_l."""
        check_is_fitted(self, "projector_")
        X = check_pairs(X)
        pair = self.projector_
        e_r = embed_sample(pair, "right", X[:, 0]).reshape(len(X), -1)
        e_l = embed_sample(pair, "left", X[:, 1]).reshape(len(X), -1)
        return np.stack([e_r, e_l], axis=1)

    def decision_function(self, X):
        """Embedding distance per pair; small means likely neighbors."""
        E = self.transform(X).astype(np.float64)
        return np.sqrt(((E[:, 0] - E[:, 1]) ** 2).sum(axis=1))

    def predict(self, X):
        return (self.decision_function(X) < self.margin / 2).astype(np.uint8)

    def score(self, X, y):
        """Standardized mean difference between negative and positive distances."""
        X, y = check_pairs(X, y)
        dist = self.decision_function(X)
        return smd(dist[y == 1], dist[y == 0])


class ShredReconstructor(BaseEstimator):
    """Orders the shreds of a :class:`ReconstructionInstance`.

    Nothing is learned at this level; ``fit`` only checks that the embedder
    is fitted, so the object drops into pipelines and grid searches over
    ``delta_max`` and the solver settings.
    """

    def __init__(self, embedder=None, delta_max=3, squared=True, exact_limit=20,
                 seed=0, restarts=8):
        self.embedder = embedder
        self.delta_max = delta_max
        self.squared = squared
        self.exact_limit = exact_limit
        self.seed = seed
        self.restarts = restarts

    def fit(self, instances=None, y=None):
        if self.embedder is None:
            raise ValueError("ShredReconstructor needs a fitted PairEmbedder")
        check_is_fitted(self.embedder, "projector_")
        self.projector_ = self.embedder.projector_
        return self

    def _run(self, instance: ReconstructionInstance):
        check_is_fitted(self, "projector_")
        return reconstruct(self.projector_, instance,
                           CompatConfig(self.delta_max, self.squared),
                           SolverConfig(self.exact_limit, self.seed, self.restarts),
                           config_echo=self.get_params(deep=False) | {"embedder": None})

    def predict(self, instance: ReconstructionInstance) -> list[int]:
        solution, _, self.last_report_ = self._run(instance)
        return list(solution.order)

    def score(self, instance: ReconstructionInstance, y=None) -> float:
        """Strict accuracy, or relaxed accuracy for multi-page instances."""
        order = self.predict(instance)
        return accuracy(order, instance, relaxed=instance.multi_page)
