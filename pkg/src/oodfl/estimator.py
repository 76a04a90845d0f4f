"""scikit-learn wrapper around a simulated federated training run."""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .client import mcm_score
from .core import RunConfig, derive_rng, validate_config
from .data import EmbeddingDataset
from .encoder import cosine_matrix
from .federation import run


class FederatedPromptClassifier(BaseEstimator, ClassifierMixin):
    """Learn prompt banks over a simulated federation of the training set.

    ``fit`` splits ``(X, y)`` across ``num_clients`` simulated clients and
    trains for ``rounds`` rounds. Prediction uses the final global bank:
    ``predict`` is the nearest prompt by cosine and ``score_samples`` is the
    maximum-softmax (MCM) score, higher meaning more in-distribution.

    Parameters
    ----------
    class_names : array of shape (n_classes, n_features), optional
        Class-name embeddings; the normalised class means when omitted.
    candidate_pool : array of shape (n_candidates, n_features), optional
        OOD label candidates; random unit vectors when omitted.
    """

    def __init__(self, num_clients=5, rounds=15, local_epochs=2, batch_size=16,
                 num_ood_prompts=10, context_dim=16, temperature=0.07, fusion=0.5,
                 partition="pathological", classes_per_client=2, dirichlet_alpha=0.5,
                 enable_bos=True, enable_goc=True, outer_lr=0.5, alpha=0.5,
                 class_names=None, candidate_pool=None, seed=42):
        self.num_clients = num_clients
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.num_ood_prompts = num_ood_prompts
        self.context_dim = context_dim
        self.temperature = temperature
        self.fusion = fusion
        self.partition = partition
        self.classes_per_client = classes_per_client
        self.dirichlet_alpha = dirichlet_alpha
        self.enable_bos = enable_bos
        self.enable_goc = enable_goc
        self.outer_lr = outer_lr
        self.alpha = alpha
        self.class_names = class_names
        self.candidate_pool = candidate_pool
        self.seed = seed

    def _config(self, n_classes, n_features) -> RunConfig:
        base = RunConfig()
        return validate_config(dataclasses.replace(
            base, num_clients=self.num_clients, rounds=self.rounds,
            local_epochs=self.local_epochs, batch_size=self.batch_size,
            num_classes=n_classes, num_ood_prompts=self.num_ood_prompts,
            embedding_dim=n_features, context_dim=self.context_dim,
            temperature=self.temperature, fusion=self.fusion, seed=self.seed,
            enable_bos=self.enable_bos, enable_goc=self.enable_goc,
            partition=self.partition, classes_per_client=self.classes_per_client,
            dirichlet_alpha=self.dirichlet_alpha,
            bdro=dataclasses.replace(base.bdro, outer_lr=self.outer_lr),
            server=dataclasses.replace(base.server, alpha=self.alpha,
                                       candidate_pool_size=max(self.num_ood_prompts, 1))))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        C, d = len(self.classes_), X.shape[1]
        if C < 2:
            raise ValueError("need at least two classes")
        if np.any(np.linalg.norm(X, axis=1) == 0):
            raise ValueError("zero-norm sample")
        cfg = self._config(C, d)
        if self.class_names is None:
            names = np.stack([X[codes == c].mean(axis=0) for c in range(C)])
        else:
            names = check_array(self.class_names, dtype=np.float64)
            if names.shape != (C, d):
                raise ValueError(f"class_names must have shape ({C}, {d})")
        if self.candidate_pool is None:
            pool = derive_rng(self.seed, "estimator/pool").standard_normal((4 * cfg.num_ood_prompts, d))
        else:
            pool = check_array(self.candidate_pool, dtype=np.float64)
        ds = EmbeddingDataset(X, codes, X, codes, X, codes, np.empty((0, d)), names, pool)
        result = run(cfg, ds)
        self.config_ = cfg
        self.encoder_ = result.encoder
        self.global_bank_ = result.global_bank
        self.ood_bank_ = result.ood_bank
        self.history_ = result.history
        self.n_features_in_ = d
        return self

    def _cosines(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X, cosine_matrix(X, self.encoder_.encode_bank(self.global_bank_))

    def decision_function(self, X):
        """Temperature-scaled cosines to each class prompt."""
        _, cos = self._cosines(X)
        return cos / self.config_.temperature

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        _, cos = self._cosines(X)
        return self.classes_[np.argmax(cos, axis=1)]

    def score_samples(self, X):
        X, _ = self._cosines(X)
        return mcm_score(X, self.global_bank_, self.encoder_, self.config_.temperature)
