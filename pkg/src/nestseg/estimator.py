"""scikit-learn style wrapper: ``fit`` on image/mask arrays, ``predict`` masks."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import DataSplit
from .graph import ArchitectureSpec, build, forward
from .losses import LossConfig, iou_per_image
from .pruning import prune
from .tensor import Tensor
from .trainer import TrainConfig, train
from .validation import check_images, check_masks


class NestedUNetSegmenter(BaseEstimator):
    """Binary segmentation network (U-Net, wide U-Net or the nested variant).

    Parameters mirror :class:`ArchitectureSpec` and :class:`TrainConfig`;
    ``base_width=None`` keeps the full-size widths. ``mode`` selects
    ``'accurate'`` (mean of all heads) or ``'fast:<d>'`` at predict time.
    When no validation arrays are given to :meth:`fit`, the last
    ``validation_fraction`` of the training images is held out for early stopping.

    Examples
    --------
    >>> seg = NestedUNetSegmenter(base_width=4, depth=3, max_epochs=1)
    >>> seg.fit(images, masks).predict(images).shape   # doctest: +SKIP
    (n, h, w)
    """

    def __init__(self, variant="unetpp", depth=5, base_width=None, convs_per_node=2,
                 deep_supervision=True, learning_rate=3e-4, batch_size=8, max_epochs=20,
                 patience=10, validation_fraction=0.15, mode="accurate", threshold=0.5,
                 random_state=0):
        self.variant = variant
        self.depth = depth
        self.base_width = base_width
        self.convs_per_node = convs_per_node
        self.deep_supervision = deep_supervision
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.mode = mode
        self.threshold = threshold
        self.random_state = random_state

    def _spec(self, X: np.ndarray) -> ArchitectureSpec:
        return ArchitectureSpec.preset(
            self.variant, depth=self.depth, base_width=self.base_width,
            convs_per_node=self.convs_per_node,
            deep_supervision=bool(self.deep_supervision and self.variant == "unetpp"),
            input_channels=X.shape[1], input_size=X.shape[2:],
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, depth=self.depth)
        y = check_masks(y, X)
        if X_val is None:
            n_val = int(round(len(X) * self.validation_fraction))
            if n_val < 1 or n_val >= len(X):
                raise ValueError(f"cannot hold out {self.validation_fraction:.0%} of {len(X)} images for validation")
            X, X_val, y, y_val = X[:-n_val], X[-n_val:], y[:-n_val], y[-n_val:]
        else:
            X_val = check_images(X_val, channels=X.shape[1], name="X_val")
            y_val = check_masks(y_val, X_val, name="y_val")

        self.spec_ = self._spec(X)
        self.graph_ = build(self.spec_, seed=self.random_state)
        config = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                             max_epochs=self.max_epochs, early_stop_patience=self.patience,
                             seed=self.random_state)
        splits = {
            "train": DataSplit("train", [f"t{k}" for k in range(len(X))], X, y),
            "val": DataSplit("val", [f"v{k}" for k in range(len(X_val))], X_val, y_val),
        }
        result = train(self.graph_, splits, config, LossConfig())
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Foreground probability per pixel, shape (N, H, W)."""
        check_is_fitted(self, "graph_")
        X = check_images(X, channels=self.n_features_in_, depth=self.depth)
        out = []
        for start in range(0, len(X), self.batch_size):
            out.append(forward(self.graph_, Tensor(X[start:start + self.batch_size]), self.mode).data[:, 0])
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean per-image IoU of the thresholded prediction."""
        proba = self.predict_proba(X)
        y = check_masks(y, check_images(X))[:, 0]
        return float(iou_per_image(proba, y, self.threshold).mean())

    def pruned(self, level: int):
        """The sub-network that serves ``fast:<level>``, sharing this model's weights."""
        check_is_fitted(self, "graph_")
        return prune(self.graph_, level)
