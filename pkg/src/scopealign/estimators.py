"""scikit-learn style classifiers over the training engine and the simulator."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .engine import TrainConfig, forward, init_mlp, log_softmax, train
from .federated import FLConfig, run_federation
from .regularizers import RegularizerSpec
from .scope import ScopeTarget, scope_estimate


def _encode(y):
    check_classification_targets(y)
    classes, codes = np.unique(y, return_inverse=True)
    return classes, codes.astype(np.int64)


class _MLPBase(ClassifierMixin, BaseEstimator):
    def _check_fitted_input(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X):
        X = self._check_fitted_input(X)
        return forward(self.model_, X)

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def scope_report(self) -> dict:
        check_is_fitted(self, "model_")
        return scope_estimate(self.model_).report(self.model_.arch_id)


class ScopeAlignedMLPClassifier(_MLPBase):
    """ReLU MLP trained with an optional scope penalty.

    ``regularizer="wsa"`` pulls each tensor's (mu, sigma) toward the scope of
    the initial model; ``"predefined_gaussian"`` uses ``target_mu`` and
    ``target_sigma`` for every tensor.
    """

    def __init__(
        self,
        hidden: Sequence[int] = (64, 64),
        regularizer: str = "wsa",
        lam: float = 5.0,
        target_mu: float = 0.0,
        target_sigma: float = 0.1,
        weights_only: bool = False,
        epochs: int = 60,
        batch_size: int = 32,
        optimizer: str = "sgd",
        learning_rate: float = 0.03,
        momentum: float = 0.9,
        weight_decay: float = 1e-5,
        max_grad_norm: Optional[float] = None,
        init: str = "normal",
        random_state: int = 0,
    ):
        self.hidden = hidden
        self.regularizer = regularizer
        self.lam = lam
        self.target_mu = target_mu
        self.target_sigma = target_sigma
        self.weights_only = weights_only
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.init = init
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = _encode(y)
        self.n_features_in_ = X.shape[1]
        data = Dataset(X, codes, len(self.classes_))
        init = init_mlp([X.shape[1], *self.hidden, len(self.classes_)], seed=self.random_state, init=self.init)
        spec = None
        if self.regularizer == "wsa":
            target = ScopeTarget.from_scope(scope_estimate(init, weights_only=self.weights_only))
            spec = RegularizerSpec("wsa", self.lam, target=target, weights_only=self.weights_only)
        elif self.regularizer == "predefined_gaussian":
            spec = RegularizerSpec("predefined_gaussian", self.lam, mu=self.target_mu, sigma=self.target_sigma,
                                   weights_only=self.weights_only)
        elif self.regularizer != "none":
            raise ValueError(f"regularizer must be 'wsa', 'predefined_gaussian' or 'none', got {self.regularizer!r}")
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            max_grad_norm=self.max_grad_norm,
        )
        self.model_, self.history_ = train(init, data, cfg, spec, rng_seed=self.random_state)
        return self


class FederatedMLPClassifier(_MLPBase):
    """MLP fitted by simulated federated training over a Dirichlet split."""

    def __init__(
        self,
        hidden: Sequence[int] = (64, 64),
        algorithm: str = "fedavg_wsa",
        lam: float = 5.0,
        num_clients: int = 10,
        participation_fraction: float = 1.0,
        rounds: int = 150,
        local_steps: int = 20,
        learning_rate: float = 0.01,
        batch_size: int = 50,
        weight_decay: float = 1e-4,
        max_grad_norm: Optional[float] = 1.0,
        dirichlet_alpha: float = 0.5,
        random_state: int = 0,
    ):
        self.hidden = hidden
        self.algorithm = algorithm
        self.lam = lam
        self.num_clients = num_clients
        self.participation_fraction = participation_fraction
        self.rounds = rounds
        self.local_steps = local_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.dirichlet_alpha = dirichlet_alpha
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = _encode(y)
        self.n_features_in_ = X.shape[1]
        data = Dataset(X, codes, len(self.classes_))
        init = init_mlp([X.shape[1], *self.hidden, len(self.classes_)], seed=self.random_state)
        cfg = FLConfig(
            num_clients=self.num_clients,
            participation_fraction=self.participation_fraction,
            rounds=self.rounds,
            local_steps=self.local_steps,
            learning_rate=self.learning_rate,
            lam=self.lam,
            algorithm=self.algorithm,
            seed=self.random_state,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            max_grad_norm=self.max_grad_norm,
        )
        result = run_federation(cfg, data, init, dirichlet_alpha=self.dirichlet_alpha)
        self.model_ = result.model
        self.records_ = result.records
        return self
