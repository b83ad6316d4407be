"""scikit-learn style estimator wrapping shape prior, encoder and trainer.

>>> from probcontour.estimator import ContourRegressor
>>> reg = ContourRegressor(n_components=8, epochs=50)          # doctest: +SKIP
>>> reg.fit(images, contours)                                  # doctest: +SKIP
>>> dists = reg.predict_distribution(images[:3])               # doctest: +SKIP
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_random_state

from ._validation import check_contours, check_images, standardize_images
from .encoder import DIRECT_VERTEX, MODES, PROBABILISTIC
from .inference import PredictiveDistribution, predict, sample_contour
from .loss import LossConfig
from .shape_model import PcaShapeModel
from .trainer import TrainConfig, fit_arrays, predict_contours, score_predictions

__all__ = ["ContourRegressor"]


class ContourRegressor(RegressorMixin, BaseEstimator):
    """Regress corresponding contour vertices from grayscale images.

    Parameters
    ----------
    mode : {"probabilistic", "direct-vertex", "det-pca"}
        ``probabilistic`` learns a Gaussian over whitened PCA weights and
        exposes a full predictive distribution; the other two are the
        deterministic baselines.
    n_components : int
        PCA modes in the shape prior (ignored by ``direct-vertex``).
    sigma2, lam, num_mc_samples : float, float, int
        Observation noise, KLD weight and Monte-Carlo samples per example.
    learning_rate, batch_size, epochs, patience : training schedule.
    widths : tuple of int
        Channel widths of the three convolutional blocks.
    validation_fraction : float
        Share of the training data held out for checkpoint selection when no
        explicit validation set is passed to :meth:`fit`.
    random_state : int
        Seeds initialization, shuffling and Monte-Carlo draws.

    Images are standardized per image inside the estimator, so raw
    intensities are fine.
    """

    def __init__(
        self,
        mode: str = PROBABILISTIC,
        n_components: int = 8,
        sigma2: float = 5e-2,
        lam: float = 1e5,
        num_mc_samples: int = 5,
        learning_rate: float = 1e-4,
        batch_size: int = 5,
        epochs: int = 200,
        patience: int = 50,
        widths=(16, 32, 64),
        validation_fraction: float = 0.15,
        random_state: int = 0,
    ):
        self.mode = mode
        self.n_components = n_components
        self.sigma2 = sigma2
        self.lam = lam
        self.num_mc_samples = num_mc_samples
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.widths = widths
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode,
            n_components=self.n_components,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=int(self.random_state),
            patience=self.patience,
            widths=tuple(self.widths),
            loss=LossConfig(sigma2=self.sigma2, lam=self.lam, num_mc_samples=self.num_mc_samples, batch_size=self.batch_size),
        )

    def fit(self, X, y, X_val=None, y_val=None):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        X = standardize_images(X)
        Y = check_contours(y, min_samples=2)
        if len(X) != len(Y):
            raise ValueError(f"{len(X)} images but {len(Y)} contours")
        if X_val is None and self.validation_fraction > 0:
            order = np.random.default_rng([int(self.random_state), 1]).permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
            X, X_val, Y, y_val = X[tr_idx], X[val_idx], Y[tr_idx], Y[val_idx]
        elif X_val is not None:
            X_val = standardize_images(X_val)
            y_val = check_contours(y_val, vertex_count=Y.shape[1] // 2)
        cfg = self._train_config()
        self.shape_model_ = None if self.mode == DIRECT_VERTEX else PcaShapeModel(self.n_components).fit(Y)
        val = (X_val, y_val) if X_val is not None else None
        result = fit_arrays(X, Y, self.shape_model_, cfg, val=val)
        self.network_ = result.network
        self.train_log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.image_shape_ = X.shape[1:]
        self.vertex_count_ = Y.shape[1] // 2
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_images(X)
        if X.shape[1:] != tuple(self.image_shape_):
            raise ValueError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return standardize_images(X)

    def predict(self, X) -> np.ndarray:
        """Point predictions (N, 2V); the probabilistic mode returns ``E(y|x)``."""
        images = self._images(X)
        return predict_contours(self.network_, images, self.shape_model_, self.mode)

    def predict_distribution(self, X) -> list[PredictiveDistribution]:
        if self.mode != PROBABILISTIC:
            raise ValueError(f"mode {self.mode!r} has no predictive distribution")
        images = self._images(X)
        return predict(self.network_, images, self.shape_model_, self.sigma2)

    def sample(self, X, n_samples: int = 1, random_state=None, include_noise: bool = False) -> np.ndarray:
        """Sampled delineations, shape (N, n_samples, 2V)."""
        rng = np.random.default_rng(check_random_state(random_state).randint(2**31 - 1))
        return np.stack([sample_contour(d, rng, n_samples, include_noise) for d in self.predict_distribution(X)])

    def score(self, X, y, sample_weight=None) -> float:
        """Mean DICE of the filled predicted delineations against ``y``."""
        refs = check_contours(y, vertex_count=self.vertex_count_)
        summary = score_predictions(self.predict(X), refs, self.image_shape_)
        if sample_weight is None:
            return summary["dice_mean"]
        return float(np.average(summary["per_item"]["dice"], weights=sample_weight))
