"""scikit-learn style front end to the GMM deep generative model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from .datasets import Subset, znormalize_array
from .evaluation import evaluate_predictions, export_embeddings, predict_proba, sample_class
from .model import ModelConfig
from .trainer import TrainConfig, train

UNKNOWN = -1


def _check_series(X, channels=None, length=None):
    """Coerce to float64 ``(n, channels, length)``; 2-D input means one channel."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ValueError(f"expected (n, length) or (n, channels, length), got shape {X.shape}")
    if channels is not None and X.shape[1:] != (channels, length):
        raise ValueError(f"expected series of shape ({channels}, {length}), got {X.shape[1:]}")
    return X


class SuSLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Semi-unsupervised classifier for (multivariate) time series.

    ``fit(X, y)`` takes ``y = -1`` for unlabeled series. Every distinct
    label value gets its own output slot; ``n_augmented`` extra slots are
    left for clusters that carry no label at all (hidden classes). With no
    labels at all the model is a pure clusterer.

    ``predict`` returns a label for series assigned to a labeled slot and
    ``-1`` otherwise; ``predict_cluster`` returns the raw slot index.
    ``transform`` returns the latent mean under the predicted slot.
    """

    def __init__(self, n_augmented=0, variant="conv", latent_dim=10, layers=2, filters=32,
                 units=256, kernel_size=5, lr=1e-3, epochs=100, batch_size=512, alpha=1.0,
                 gamma=1.0, weight_decay=0.0, clip=1.0, validation_fraction=0.2,
                 znormalize=True, dtype="float64", max_rows=None, random_state=0):
        self.n_augmented = n_augmented
        self.variant = variant
        self.latent_dim = latent_dim
        self.layers = layers
        self.filters = filters
        self.units = units
        self.kernel_size = kernel_size
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.alpha = alpha
        self.gamma = gamma
        self.weight_decay = weight_decay
        self.clip = clip
        self.validation_fraction = validation_fraction
        self.znormalize = znormalize
        self.dtype = dtype
        self.max_rows = max_rows
        self.random_state = random_state

    # ------------------------------------------------------------- helpers

    def _prep(self, X):
        X = _check_series(X, *getattr(self, "series_shape_", (None, None)))
        return znormalize_array(X) if self.znormalize else X

    def _seed(self):
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(2 ** 31))

    def _encode_truth(self, y):
        """Known labels -> slot index; other labels -> indices after the known ones."""
        lut = {c: i for i, c in enumerate(self.classes_)}
        extra = sorted({v for v in y if v not in lut and v != UNKNOWN})
        for v in extra:
            lut[v] = len(lut)
        return np.array([lut[v] for v in y], dtype=np.int64), len(lut)

    # ----------------------------------------------------------------- fit

    def fit(self, X, y=None, X_val=None, y_val=None, init_params=None):
        """Train on ``X`` with partial labels ``y`` (``-1`` = unlabeled).

        Model selection uses ``(X_val, y_val)`` when given (labels of
        classes never seen in ``y`` are scored through cluster mapping);
        otherwise a stratified ``validation_fraction`` of the labeled rows
        is held out. Without any validation data the last epoch is kept.
        """
        X = _check_series(X)
        n = len(X)
        y = np.full(n, UNKNOWN) if y is None else np.asarray(y)
        if y.shape != (n,):
            raise ValueError(f"y has shape {y.shape}, expected ({n},)")
        self.series_shape_ = X.shape[1:]
        X = znormalize_array(X) if self.znormalize else X
        labeled_mask = y != UNKNOWN
        self.classes_ = np.unique(y[labeled_mask])
        K = len(self.classes_)
        if K + self.n_augmented < 1:
            raise ValueError("no labels and n_augmented=0: the model would have no output slots")
        seed = self._seed()

        slot = np.full(n, UNKNOWN, dtype=np.int64)
        slot[labeled_mask] = np.searchsorted(self.classes_, y[labeled_mask])
        ids = np.arange(n)
        lab_ids = ids[labeled_mask]
        if X_val is not None:
            Xv = self._prep(X_val)
            yv, n_true = self._encode_truth(np.asarray(y_val))
            val = Subset(Xv, yv, np.arange(len(Xv)))
        elif self.validation_fraction > 0 and len(lab_ids) >= 2 * max(K, 1):
            counts = np.bincount(slot[lab_ids], minlength=K)
            strat = slot[lab_ids] if counts.min() >= 2 else None
            lab_ids, val_ids = train_test_split(lab_ids, test_size=self.validation_fraction,
                                                stratify=strat, random_state=seed)
            val = Subset(X[val_ids], slot[val_ids], val_ids)
            n_true = K
        else:
            val = Subset(X[:0], slot[:0], ids[:0])
            n_true = max(K, 1)
        lab_ids = np.sort(lab_ids)
        unl_ids = ids[~labeled_mask]
        labeled = Subset(X[lab_ids], slot[lab_ids], lab_ids)
        unlabeled = Subset(X[unl_ids], slot[unl_ids], unl_ids)

        self.model_config_ = ModelConfig(
            channels=X.shape[1], length=X.shape[2], n_known_classes=K,
            n_augmented_classes=self.n_augmented, latent_dim=self.latent_dim, layers=self.layers,
            filters=self.filters, units=self.units, kernel_size=self.kernel_size,
            variant=self.variant)
        self.train_config_ = TrainConfig(
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, alpha=self.alpha,
            gamma=self.gamma, weight_decay=self.weight_decay, clip=self.clip, seed=seed,
            dtype=self.dtype, max_rows=self.max_rows)
        self.params_, self.history_ = train(
            self.model_config_, self.train_config_, labeled, unlabeled, val,
            known_classes=range(K), n_true=n_true, init_params=init_params)
        return self

    # ------------------------------------------------------------- predict

    def predict_proba(self, X):
        """q(slot | x) over all ``n_classes_`` slots (labeled slots first)."""
        check_is_fitted(self, "params_")
        return predict_proba(self.params_, self._prep(X))

    def predict_cluster(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def predict(self, X):
        slots = self.predict_cluster(X)
        K = len(self.classes_)
        out = np.full(len(slots), UNKNOWN, dtype=self.classes_.dtype if K else np.int64)
        known = slots < K
        out[known] = self.classes_[slots[known]]
        return out

    @property
    def n_classes_(self):
        check_is_fitted(self, "params_")
        return self.model_config_.n_classes

    def transform(self, X):
        check_is_fitted(self, "params_")
        _, _, _, z = export_embeddings(self.params_, self._prep(X))
        return z

    def cluster_report(self, X, y):
        """Evaluation with Hungarian mapping of unlabeled slots to classes of ``y``."""
        slots = self.predict_cluster(X)
        truth, n_true = self._encode_truth(np.asarray(y))
        return evaluate_predictions(slots, truth, range(len(self.classes_)),
                                    self.n_classes_, n_true)

    def sample(self, slot, n_samples=1, random_state=0):
        """Draw series from ``p(x | z) p(z | slot)`` (in normalized units)."""
        check_is_fitted(self, "params_")
        return sample_class(self.params_, int(slot), n_samples, seed=random_state)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.three_d_array = True
        return tags
