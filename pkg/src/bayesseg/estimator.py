"""scikit-learn style estimator wrapping the network, training loop and MC inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import LabeledSample
from .inference import InferenceConfig, PredictiveOutput, mc_predict
from .metrics import evaluate_masks
from .network import NetworkConfig, build, load_checkpoint
from .training import TrainConfig, train


def check_images(X, size_multiple: int = 1) -> np.ndarray:
    """Validate a stack of grayscale images to float32 [N,H,W] in [0,1]."""
    X = np.asarray(X)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected images of shape (n, H, W), got {X.shape}")
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"image intensities must lie in [0, 1], found {X.min():.4g}..{X.max():.4g}")
    if X.shape[1] % size_multiple or X.shape[2] % size_multiple:
        raise ValueError(f"image size {X.shape[1:]} must be divisible by {size_multiple}")
    return X


def check_masks(y, X_shape, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(X_shape):
        raise ValueError(f"masks {y.shape} do not match images {tuple(X_shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("masks must contain integer class labels")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"mask labels must lie in 0..{num_classes - 1}, found {y.min()}..{y.max()}")
    return y


class BayesianSegmenter(ClassifierMixin, BaseEstimator):
    """Per-pixel classifier with MC-dropout uncertainty.

    Parameters
    ----------
    num_classes : int, default=5
        Number of label classes C.
    growth_rate, layers_per_dense_block, num_pool_levels, initial_channels, kernel_size : int
        Dense-network topology.
    dropout_rate : float, default=0.4
        Dropout before every convolution, at training and prediction time.
    input_dropout_rate : float, default=0.0
        Dropout on the raw image before the first convolution.
    bayesian : bool, default=True
        Train with the Monte-Carlo Bayesian loss and predict with ``n_passes``
        dropout passes. ``False`` gives the baseline: class-weighted cross
        entropy and a single deterministic pass.
    iterations, batch_size, lr, lr_decay_factor, lr_decay_at, t_train, augmentation
        Training schedule (desk-scale defaults).
    n_passes : int, default=50
        MC-dropout passes used by ``predict*``.
    random_state : int, default=0
        Seed for initialisation, training streams and MC passes.

    Attributes
    ----------
    model_ : BFCDenseNet
        The trained network.
    train_log_ : TrainLog
        Per-iteration loss and learning rate.
    classes_ : ndarray of shape (num_classes,)
    """

    def __init__(self, num_classes=5, growth_rate=8, layers_per_dense_block=2, num_pool_levels=2,
                 initial_channels=16, kernel_size=3, dropout_rate=0.4, input_dropout_rate=0.0,
                 bayesian=True,
                 iterations=3000, batch_size=2, lr=1e-3, lr_decay_factor=0.1, lr_decay_at=2000,
                 t_train=10, augmentation=True, n_passes=50, random_state=0):
        self.num_classes = num_classes
        self.growth_rate = growth_rate
        self.layers_per_dense_block = layers_per_dense_block
        self.num_pool_levels = num_pool_levels
        self.initial_channels = initial_channels
        self.kernel_size = kernel_size
        self.dropout_rate = dropout_rate
        self.input_dropout_rate = input_dropout_rate
        self.bayesian = bayesian
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_at = lr_decay_at
        self.t_train = t_train
        self.augmentation = augmentation
        self.n_passes = n_passes
        self.random_state = random_state

    def _network_config(self) -> NetworkConfig:
        return NetworkConfig(
            num_classes=self.num_classes,
            growth_rate=self.growth_rate,
            layers_per_dense_block=self.layers_per_dense_block,
            num_pool_levels=self.num_pool_levels,
            initial_channels=self.initial_channels,
            dropout_rate=self.dropout_rate,
            kernel_size=self.kernel_size,
            input_dropout_rate=self.input_dropout_rate,
        ).validate()

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_at=min(self.lr_decay_at, self.iterations),
            t_train=self.t_train,
            dropout_rate=self.dropout_rate,
            bayesian=self.bayesian,
            seed=self.random_state,
            checkpoint_every=0,
            augmentation=self.augmentation,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on images ``X`` (n, H, W) with label masks ``y`` (n, H, W)."""
        config = self._network_config()
        X = check_images(X, config.size_multiple)
        y = check_masks(y, X.shape, config.num_classes)
        val = None
        if X_val is not None:
            X_val = check_images(X_val, config.size_multiple)
            y_val = check_masks(y_val, X_val.shape, config.num_classes)
            val = [LabeledSample(a, b) for a, b in zip(X_val, y_val)]
        self.model_ = build(config, seed=self.random_state)
        self.model_, self.train_log_ = train(
            self.model_, [LabeledSample(a, b) for a, b in zip(X, y)], val, self._train_config()
        )
        self.classes_ = np.arange(config.num_classes)
        return self

    @classmethod
    def from_checkpoint(cls, path, **params) -> "BayesianSegmenter":
        model, items = load_checkpoint(path)
        c = model.config
        kw = dict(num_classes=c.num_classes, growth_rate=c.growth_rate,
                  layers_per_dense_block=c.layers_per_dense_block, num_pool_levels=c.num_pool_levels,
                  initial_channels=c.initial_channels, kernel_size=c.kernel_size,
                  dropout_rate=c.dropout_rate, input_dropout_rate=c.input_dropout_rate)
        if "train.bayesian" in items:
            kw["bayesian"] = items["train.bayesian"].lower() == "true"
        kw.update(params)
        est = cls(**kw)
        est.model_ = model
        est.classes_ = np.arange(c.num_classes)
        return est

    def predict_uncertainty(self, X) -> PredictiveOutput:
        """Mean probabilities, aleatoric/epistemic/combined uncertainty and segmentation."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.size_multiple)
        cfg = InferenceConfig(t=self.n_passes, dropout_rate=self.dropout_rate, bayesian=self.bayesian)
        return mc_predict(self.model_, X, cfg, seed=self.random_state)

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities of shape (n, C, H, W)."""
        return self.predict_uncertainty(X).mean_probs

    def predict(self, X) -> np.ndarray:
        """Label masks of shape (n, H, W)."""
        return self.predict_uncertainty(X).segmentation

    def score(self, X, y, sample_weight=None) -> float:
        """Mean Dice over classes, averaged over images."""
        pred = self.predict(X)
        y = check_masks(y, pred.shape, self.model_.config.num_classes)
        return evaluate_masks(pred, y, self.model_.config.num_classes).mean_dice
