import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import FunctionTransformer

from susl4ts import SuSLClassifier, make_waveforms

DATA = make_waveforms(n_train=60, n_test=20, length=16, seed=4)
FAST = dict(latent_dim=2, filters=4, layers=1, kernel_size=3, epochs=2, batch_size=16,
            lr=3e-3, n_augmented=1)


def partial_labels(y, hidden=(3,), keep=0.5, seed=0):
    rng = np.random.default_rng(seed)
    out = y.copy()
    out[np.isin(y, hidden) | (rng.random(len(y)) > keep)] = -1
    return out


def test_params_round_trip_and_clone():
    est = SuSLClassifier(**FAST)
    assert est.get_params()["latent_dim"] == 2
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    est.set_params(epochs=5)
    assert est.epochs == 5


def test_fit_predict_transform():
    y = partial_labels(DATA.y_train)
    est = SuSLClassifier(**FAST).fit(DATA.X_train, y)
    assert list(est.classes_) == [0, 1, 2]
    assert est.n_classes_ == 4 and len(est.history_) == 2
    proba = est.predict_proba(DATA.X_test)
    assert proba.shape == (20, 4) and np.allclose(proba.sum(axis=1), 1)
    pred = est.predict(DATA.X_test)
    slots = est.predict_cluster(DATA.X_test)
    assert np.array_equal(pred == -1, slots == 3)
    assert est.transform(DATA.X_test).shape == (20, 2)
    assert est.sample(3, 4).shape == (4, 1, 16)
    rep = est.cluster_report(DATA.X_test, DATA.y_test)
    assert rep.confusion.shape == (4, 4)


def test_labels_keep_their_original_values():
    y = np.where(DATA.y_train >= 0, DATA.y_train * 10 + 5, -1)
    est = SuSLClassifier(**{**FAST, "n_augmented": 0}).fit(DATA.X_train, y)
    assert list(est.classes_) == [5, 15, 25, 35]
    assert set(est.predict(DATA.X_test)) <= {5, 15, 25, 35}


def test_two_dimensional_input_is_one_channel():
    X2 = DATA.X_train[:, 0, :]
    est = SuSLClassifier(**FAST).fit(X2, partial_labels(DATA.y_train))
    assert est.series_shape_ == (1, 16)
    a = est.predict_proba(DATA.X_test[:, 0, :])
    b = est.predict_proba(DATA.X_test)
    assert np.array_equal(a, b)


def test_fit_is_deterministic_for_fixed_seed():
    y = partial_labels(DATA.y_train)
    a = SuSLClassifier(**FAST).fit(DATA.X_train, y)
    b = SuSLClassifier(**FAST).fit(DATA.X_train, y)
    assert a.params_ == b.params_
    assert a.history_.to_csv() == b.history_.to_csv()


def test_pure_clustering_without_labels():
    est = SuSLClassifier(**{**FAST, "n_augmented": 3}).fit(DATA.X_train)
    assert len(est.classes_) == 0 and est.n_classes_ == 3
    assert np.all(est.predict(DATA.X_test) == -1)


def test_explicit_validation_set_scores_unseen_labels():
    y = partial_labels(DATA.y_train)
    est = SuSLClassifier(**FAST).fit(DATA.X_train, y, X_val=DATA.X_test, y_val=DATA.y_test)
    assert all(0 <= a <= 1 for a in est.history_.column("val_acc"))


def test_input_validation():
    est = SuSLClassifier(**FAST)
    with pytest.raises(NotFittedError):
        est.predict(DATA.X_test)
    with pytest.raises(ValueError):
        est.fit(DATA.X_train, DATA.y_train[:-1])
    bad = DATA.X_train.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, DATA.y_train)
    with pytest.raises(ValueError):
        SuSLClassifier(**{**FAST, "n_augmented": 0}).fit(DATA.X_train)
    est.fit(DATA.X_train, partial_labels(DATA.y_train))
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 1, 17)))


def test_works_inside_a_pipeline():
    pipe = make_pipeline(FunctionTransformer(lambda X: X * 2.0), SuSLClassifier(**FAST))
    pipe.fit(DATA.X_train, partial_labels(DATA.y_train))
    assert pipe.predict(DATA.X_test).shape == (20,)
