"""scikit-learn estimator facade over the training engine.

BinaryNetClassifier wraps spec construction, the Adam training loop, and
float-path prediction behind fit/predict/score so the engine composes with
sklearn model selection utilities. The heavy lifting stays in the engine
modules; this class only adapts conventions (flat feature matrices, label
re-encoding, get_params round-trips).
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import DataBundle, Dataset
from .errors import ShapeError
from .frozen import export_frozen
from .network import make_spec
from .tensor import softmax
from .training import OptimConfig, evaluate, train


class BinaryNetClassifier(BaseEstimator, ClassifierMixin):
    """1-bit CNN classifier with float-domain training.

    Parameters mirror the engine's spec and optimizer knobs. X may be
    (n, C, H, W) images or flat (n, C*H*W) rows matching the preset's input
    dims (28x28 grayscale for the default toy preset).
    """

    def __init__(self, arch="mnist_toy", width=None, groups=1, nonlinearity="relu",
                 real_conv=False, stem_pool=True, epochs=10, lr=0.01,
                 schedule="multistep", milestones=(), decay_factor=0.1,
                 batch_size=128, weight_decay=0.0, seed=0):
        self.arch = arch
        self.width = width
        self.groups = groups
        self.nonlinearity = nonlinearity
        self.real_conv = real_conv
        self.stem_pool = stem_pool
        self.epochs = epochs
        self.lr = lr
        self.schedule = schedule
        self.milestones = milestones
        self.decay_factor = decay_factor
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def _spec(self, n_classes):
        return make_spec(
            self.arch, width=self.width, groups=self.groups,
            nonlinearity=self.nonlinearity, num_classes=n_classes,
            toy_real_conv=self.real_conv, toy_stem_pool=self.stem_pool,
        )

    def _as_images(self, X, spec):
        c, (h, w) = spec.in_channels, spec.in_hw
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 2:
            if X.shape[1] != c * h * w:
                raise ShapeError(
                    f"flat input has {X.shape[1]} features; preset expects {c * h * w}"
                )
            return X.reshape(-1, c, h, w)
        if X.ndim == 4:
            return X
        raise ShapeError(f"expected 2-D or 4-D input, got {X.ndim}-D")

    def fit(self, X, y):
        X2 = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float32)
        if X2.ndim == 2:
            X2, y = check_X_y(X2, y, dtype=np.float32)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        spec = self._spec(len(self.classes_))
        images = self._as_images(X2, spec)
        optim = OptimConfig(
            lr=self.lr, weight_decay=self.weight_decay, schedule=self.schedule,
            milestones=tuple(self.milestones), decay_factor=self.decay_factor,
            epochs=self.epochs, batch_size=self.batch_size,
        )
        bundle = DataBundle(
            train=Dataset(images, y_idx.astype(np.int64)),
            test=Dataset(images[:1], y_idx[:1].astype(np.int64)),
            mean=0.0,
        )
        self.network_, self.metrics_ = train(
            spec, optim, bundle, seed=self.seed, eval_each_epoch=False
        )
        self.n_features_in_ = X2.shape[1] if X2.ndim == 2 else int(np.prod(X2.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float32)
        images = self._as_images(X, self.network_.spec)
        return self.network_.forward(images, train=False)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def score(self, X, y):
        check_is_fitted(self, "network_")
        X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float32)
        images = self._as_images(X, self.network_.spec)
        _, y_idx = np.unique(y, return_inverse=True)
        mapped = np.searchsorted(self.classes_, np.asarray(y))
        return evaluate(self.network_, Dataset(images, mapped.astype(np.int64)))

    def export(self, path, nudge_zeros=False):
        """Write the trained network as a bit-packed FrozenModel."""
        check_is_fitted(self, "network_")
        export_frozen(self.network_, path, nudge_zeros=nudge_zeros)
        return path
