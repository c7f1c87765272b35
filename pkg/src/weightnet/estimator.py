"""scikit-learn compatible classifier around the plug-conv CNN."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted, column_or_1d

from .complexity import ComplexityReport, report
from .data import Dataset
from .model import ModelSpec, build_model
from .training import TrainConfig, predict_logits, train

DEFAULT_STAGES = (
    {"blocks": 1, "channels": 8, "stride": 1},
    {"blocks": 1, "channels": 16, "stride": 2},
    {"blocks": 1, "channels": 16, "stride": 1},
)


def check_images(X, *, ensure_min_samples: int = 1) -> np.ndarray:
    """Validate image input and return float32 (n, C, H, W).

    Accepts (n, H, W) grayscale stacks, adding the channel axis.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=[np.float32, np.float64],
                    ensure_min_samples=ensure_min_samples)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, C, H, W) or (n, H, W), got {X.shape}")
    return np.ascontiguousarray(X, dtype=np.float32)


def check_images_labels(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X)
    y = column_or_1d(y, warn=True)
    check_consistent_length(X, y)
    check_classification_targets(y)
    return X, y


class WeightNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier whose convolutions may be static or weight-generating.

    Parameters
    ----------
    stages : sequence of dict or None
        Stage layout, as in the ``model.stages`` config section. A stage
        without a ``conv`` entry takes ``conv``.
    conv : dict
        Default conv kind, e.g. ``{"kind": "weightnet", "M": 2, "G": 2}``.
    conv_stages : sequence of int or None
        Stage indices that receive ``conv``; others stay static. ``None``
        means every stage after the first.
    epochs, batch_size, lr, momentum, weight_decay :
        Optimizer settings; the learning rate decays linearly to zero.
    random_state : int
        Seeds parameter init and batch order.
    """

    def __init__(self, stages=None, conv=None, conv_stages=None, epochs=5, batch_size=32, lr=0.05,
                 momentum=0.9, weight_decay=5e-4, random_state=0):
        self.stages = stages
        self.conv = conv
        self.conv_stages = conv_stages
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _model_spec(self, in_channels: int, n_classes: int) -> ModelSpec:
        stages = [dict(s) for s in (self.stages if self.stages is not None else DEFAULT_STAGES)]
        conv = self.conv if self.conv is not None else {"kind": "weightnet", "M": 2, "G": 2}
        chosen = range(1, len(stages)) if self.conv_stages is None else self.conv_stages
        for i, s in enumerate(stages):
            if "conv" not in s:
                s["conv"] = dict(conv) if i in chosen else {"kind": "static"}
        return ModelSpec.from_dict({"stages": stages, "num_classes": max(n_classes, 2),
                                    "in_channels": in_channels})

    def fit(self, X, y, eval_set=None):
        X, y = check_images_labels(X, y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.input_shape_ = X.shape[1:]
        self.spec_ = self._model_spec(X.shape[1], len(self.classes_))
        self.model_ = build_model(self.spec_, seed=self.random_state)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                          weight_decay=self.weight_decay, seed=self.random_state)
        eval_data = None
        if eval_set is not None:
            Xe, ye = check_images_labels(*eval_set)
            eval_data = Dataset(Xe, np.searchsorted(self.classes_, ye))
        self.history_ = train(self.model_, Dataset(X, encoded), cfg, eval_data)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, ["model_", "classes_"])
        X = check_images(X)
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has image shape {X.shape[1:]}, fitted on {self.input_shape_}")
        return predict_logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, ["model_", "classes_"])
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def complexity(self) -> ComplexityReport:
        check_is_fitted(self, ["model_"])
        return report(self.model_, tuple(self.input_shape_[1:]))
