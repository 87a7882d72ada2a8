"""scikit-learn wrapper around the mixture model and its training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_choice, check_images, check_labels
from .datasets import Dataset
from .models import GATE_KINDS, Architecture, build_model, conditional_forward
from .regularizers import REG_KINDS, RegConfig
from .training import TrainConfig, predict, train


class MoEClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Mixture-of-experts image classifier.

    ``transform`` returns the gate probabilities (N x n_experts), which is
    what the routing metrics consume. With ``gate="none"`` the model is a
    single expert and ``n_experts`` must be 1.

    Parameters mirror :class:`TrainConfig` and :class:`RegConfig`;
    ``regularizer`` is one of ``"none"``, ``"importance"``, ``"similarity"``.
    """

    def __init__(self, n_experts=5, gate="softmax", regularizer="none", w_importance=0.0,
                 beta_s=0.0, beta_d=0.0, epochs=20, batch_size=128, learning_rate=1e-3,
                 random_state=0, expert_output_relu=False, gate_output_relu=False,
                 responsive_conv=False):
        self.n_experts = n_experts
        self.gate = gate
        self.regularizer = regularizer
        self.w_importance = w_importance
        self.beta_s = beta_s
        self.beta_d = beta_d
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.expert_output_relu = expert_output_relu
        self.gate_output_relu = gate_output_relu
        self.responsive_conv = responsive_conv

    def _train_config(self) -> TrainConfig:
        check_choice("gate", self.gate, GATE_KINDS)
        check_choice("regularizer", self.regularizer, REG_KINDS)
        if self.gate == "none" and self.n_experts != 1:
            raise ValueError("gate='none' is a single model; set n_experts=1")
        seed = 0 if self.random_state is None else int(self.random_state)
        reg = RegConfig(self.regularizer, self.w_importance, self.beta_s, self.beta_d)
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, seed, reg)

    def fit(self, X, y):
        cfg = self._train_config()
        X = check_images(X)
        self.classes_, encoded = check_labels(y, len(X))
        self.image_size_ = tuple(X.shape[2:])
        self.n_features_in_ = X.shape[2] * X.shape[3]
        arch = Architecture(image_size=self.image_size_, expert_output_relu=self.expert_output_relu,
                            gate_output_relu=self.gate_output_relu,
                            responsive_conv=self.responsive_conv)
        ds = Dataset(X, encoded, [str(c) for c in self.classes_])
        self.model_ = build_model(self.n_experts, len(self.classes_), self.gate, cfg.seed, arch)
        self.report_ = train(self.model_, ds, cfg, regime="estimator")
        self.loss_curve_ = list(self.report_.loss_curve)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_images(X, self.image_size_))[0]

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X):
        """Gate probabilities, one row per sample."""
        check_is_fitted(self, "model_")
        return predict(self.model_, check_images(X, self.image_size_))[1]

    def predict_sparse(self, X, top_k=None, threshold=None):
        """Labels from a mixture that evaluates only the selected experts.

        Returns (labels, number of expert evaluations).
        """
        check_is_fitted(self, "model_")
        y, evals = conditional_forward(self.model_, check_images(X, self.image_size_),
                                       top_k=top_k, threshold=threshold)
        return self.classes_[np.argmax(y, axis=1)], evals

    def get_weights(self) -> dict[str, np.ndarray]:
        """Copies of every learned array, keyed like the checkpoint entries."""
        check_is_fitted(self, "model_")
        return {k: p.data.copy() for k, p in self.model_.named_parameters().items()}
