"""scikit-learn style front ends.

``TransductiveLabelPropagation`` runs the graph propagation on fixed feature
vectors and plugs into pipelines. ``MultiTapClassifier`` wraps episodic
meta-training of the full network behind ``fit`` / ``transform``.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_alpha, check_features, check_images, check_labels
from .datasets import FewShotData
from .episodes import EpisodeSpec
from .evaluation import EvalReport, evaluate
from .graph import build_operator
from .model import ModelConfig
from .propagation import class_probabilities, initial_scores, propagate_closed_form
from .training import TrainConfig, train


class TransductiveLabelPropagation(ClassifierMixin, BaseEstimator):
    """Label propagation over an m-nearest-neighbour Gaussian graph.

    ``fit`` stores the labeled rows; ``predict`` builds one graph over the
    labeled rows plus the rows being predicted and propagates jointly, so
    the batch passed to ``predict`` influences its own labels.

    Parameters
    ----------
    alpha : float
        Propagation rate in (0, 1).
    n_neighbors : int
        Entries kept per row before symmetrization; clipped to ``n - 1``.
    length_scale : float
        Common divisor applied to every feature vector before the Gaussian.
    """

    def __init__(self, alpha: float = 0.99, n_neighbors: int = 20, length_scale: float = 1.0):
        self.alpha = alpha
        self.n_neighbors = n_neighbors
        self.length_scale = length_scale

    def fit(self, X, y):
        X = check_features(X)
        y = check_labels(y, len(X))
        check_alpha(self.alpha)
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        self.classes_, self.y_index_ = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.X_fit_ = X
        self.n_features_in_ = X.shape[1]
        return self

    def _scores(self, X) -> torch.Tensor:
        check_is_fitted(self)
        X = check_features(X, self.n_features_in_)
        z = torch.as_tensor(np.vstack([self.X_fit_, X]))
        sigma = torch.full((len(z),), float(self.length_scale), dtype=z.dtype)
        m = max(1, min(int(self.n_neighbors), len(z) - 1))
        _, _, lap = build_operator(z, sigma, m)
        p0 = initial_scores(self.y_index_, len(self.classes_), len(X))
        return propagate_closed_form(lap, p0, self.alpha)[len(self.X_fit_):]

    def predict_proba(self, X):
        return class_probabilities(self._scores(X)).numpy()

    def predict(self, X):
        return self.classes_[torch.argmax(self._scores(X), dim=1).numpy()]


class MultiTapClassifier(TransformerMixin, BaseEstimator):
    """Episodically meta-trained Conv-64F with multi-layer propagation loss.

    ``fit(X, y)`` samples ``n_way``-way ``k_shot``-shot tasks from the
    images ``X`` with class ids ``y``. ``weights=(0, 0, 1)`` trains the
    single-layer baseline. ``transform`` returns deepest-tap embeddings;
    ``predict_episode`` labels a query batch from a labeled support batch.
    """

    def __init__(
        self,
        n_way: int = 5,
        k_shot: int = 1,
        q_per_class: int = 15,
        alpha: float = 0.99,
        m: int = 20,
        weights=(1.0, 1.0, 1.0),
        layers=(2, 3, 4),
        learning_rate: float = 0.001,
        decay_factor: float = 0.8,
        decay_every: int = 5000,
        n_episodes: int = 30000,
        width: int = 64,
        relation_channels=(64, 1),
        relation_hidden: int = 8,
        precision: str = "single",
        random_state: int = 0,
    ):
        self.n_way = n_way
        self.k_shot = k_shot
        self.q_per_class = q_per_class
        self.alpha = alpha
        self.m = m
        self.weights = weights
        self.layers = layers
        self.learning_rate = learning_rate
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.n_episodes = n_episodes
        self.width = width
        self.relation_channels = relation_channels
        self.relation_hidden = relation_hidden
        self.precision = precision
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            n_way=self.n_way, k_shot=self.k_shot, q_per_class=self.q_per_class,
            eval_n_way=self.n_way, eval_k_shot=self.k_shot, eval_q_per_class=self.q_per_class,
            alpha=self.alpha, m=self.m, weights=tuple(self.weights), layers=tuple(self.layers),
            learning_rate=self.learning_rate, decay_factor=self.decay_factor,
            decay_every=self.decay_every, total_episodes=self.n_episodes,
            seed=self.random_state, precision=self.precision,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        cfg = self._train_config()
        data = FewShotData(X.astype(np.float32), y)
        val = None
        if X_val is not None:
            X_val = check_images(X_val, X.shape[1:], "X_val")
            val = FewShotData(X_val.astype(np.float32), check_labels(y_val, len(X_val), "y_val"))
        model_cfg = ModelConfig(
            image_shape=tuple(X.shape[1:]), width=self.width, layers=cfg.layers,
            relation_channels=tuple(self.relation_channels), relation_hidden=self.relation_hidden,
            seed=self.random_state,
        )
        result = train(cfg, data, val, model_config=model_cfg)
        self.model_ = result.best_model() if val is not None else result.model
        self.history_ = result.metrics
        self.image_shape_ = tuple(X.shape[1:])
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_images(X, self.image_shape_)
        self.model_.eval()
        with torch.no_grad():
            emb = self.model_.embed(X)
        return emb.flat(max(self.model_.layers)).double().numpy()

    def predict_episode(self, X_support, y_support, X_query):
        check_is_fitted(self)
        Xs = check_images(X_support, self.image_shape_, "X_support")
        Xq = check_images(X_query, self.image_shape_, "X_query")
        ys = check_labels(y_support, len(Xs), "y_support")
        classes, idx = np.unique(ys, return_inverse=True)
        self.model_.eval()
        with torch.no_grad():
            out = self.model_.forward_episode(
                np.concatenate([Xs, Xq]), idx, len(classes), len(Xq), alpha=self.alpha, m=self.m
            )
        return classes[out.predictions().numpy()]

    def evaluate(self, X, y, n_episodes: int = 600, seed: int = 0) -> EvalReport:
        check_is_fitted(self)
        data = FewShotData(check_images(X, self.image_shape_).astype(np.float32), check_labels(y, len(X)))
        spec = EpisodeSpec(self.n_way, self.k_shot, self.q_per_class)
        return evaluate(self.model_, data, spec, n_episodes, seed, self.alpha, self.m)

    def score(self, X, y, n_episodes: int = 100, seed: int = 0) -> float:
        """Mean episodic accuracy on tasks drawn from ``(X, y)``."""
        return self.evaluate(X, y, n_episodes, seed).mean_accuracy
