"""Scikit-learn style front end for the trainable classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .attacks import LinfConfig
from .data_io import Dataset
from .defenses import AugmentPolicy, train
from .network import TrainConfig, softmax
from .warp import AttackSpace

__all__ = ["RobustImageClassifier"]


class RobustImageClassifier(BaseEstimator, ClassifierMixin):
    """Convolutional digit classifier with augmentation-based robustness.

    Follows the fit/predict estimator protocol so it composes with the
    usual model-selection tooling. ``policy`` selects the per-example
    training augmentation: 'none', 'random' (one uniform warp),
    'worst_of_k' (hardest of k warps under the current model), or
    'linf_pgd' (pixel-space adversarial training).
    """

    def __init__(
        self,
        policy: str = "none",
        max_trans: float = 3.0,
        max_rot: float = 30.0,
        k: int = 10,
        epsilon: float = 0.3,
        linf_steps: int = 40,
        epochs: int = 10,
        lr: float = 0.05,
        momentum: float = 0.9,
        batch_size: int = 64,
        init_seed: int = 0,
        data_seed: int = 0,
        augment_seed: int = 0,
        image_shape: tuple = (1, 28, 28),
    ):
        self.policy = policy
        self.max_trans = max_trans
        self.max_rot = max_rot
        self.k = k
        self.epsilon = epsilon
        self.linf_steps = linf_steps
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.init_seed = init_seed
        self.data_seed = data_seed
        self.augment_seed = augment_seed
        self.image_shape = image_shape

    def _check_images(self, X) -> np.ndarray:
        X = np.asarray(X)
        shape = tuple(self.image_shape)
        if X.ndim == 2 and X.shape[1] == int(np.prod(shape)):
            X = X.reshape((len(X),) + shape)
        elif X.ndim == 3:
            X = X[:, None, :, :]
        if X.ndim != 4:
            raise ValueError(
                f"X must be (n, c, h, w), (n, h, w) or flat (n, {int(np.prod(shape))}), got {X.shape}"
            )
        if not np.issubdtype(X.dtype, np.floating):
            X = X.astype(np.float32)
        if X.size and (X.min() < 0 or X.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        return X

    def _augment_policy(self) -> AugmentPolicy:
        space = AttackSpace(self.max_trans, self.max_rot)
        if self.policy == "none":
            return AugmentPolicy(kind="none", rng_seed=self.augment_seed)
        if self.policy == "random":
            return AugmentPolicy(kind="random", space=space, rng_seed=self.augment_seed)
        if self.policy == "worst_of_k":
            return AugmentPolicy(
                kind="worst_of_k", space=space, k=self.k, rng_seed=self.augment_seed
            )
        if self.policy == "linf_pgd":
            return AugmentPolicy(
                kind="linf_pgd",
                linf=LinfConfig(epsilon=self.epsilon, steps=self.linf_steps),
                rng_seed=self.augment_seed,
            )
        raise ValueError(f"unknown policy {self.policy!r}")

    def fit(self, X, y):
        X = self._check_images(X)
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images vs {len(y)} labels")
        config = TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            batch_size=self.batch_size,
            epochs=self.epochs,
            init_seed=self.init_seed,
            data_seed=self.data_seed,
        )
        self.history_ = []
        self.network_ = train(
            Dataset(X, y),
            self._augment_policy(),
            config,
            on_epoch=lambda e, acc, loss: self.history_.append(
                {"epoch": e, "natural_accuracy": acc, "mean_loss": loss}
            ),
        )
        self.classes_ = np.arange(self.network_.num_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        if not hasattr(self, "network_"):
            raise AttributeError("this classifier is not fitted yet; call fit first")
        return self.network_.logits_batch(self._check_images(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))
