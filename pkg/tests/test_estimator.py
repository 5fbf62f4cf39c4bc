import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import tiny_setup
from transplant.estimator import AdapterTransplanter


def _teacher(task="cls"):
    teacher, *_ = tiny_setup(task)
    return teacher


def test_params_round_trip_and_clone():
    est = AdapterTransplanter(teacher=_teacher(), depth=3, lam=0.5, steps=7)
    params = est.get_params()
    assert params["depth"] == 3 and params["lam"] == 0.5 and params["strategy"] == "back-distill"
    assert clone(est).get_params()["steps"] == 7
    assert est.set_params(steps=9).steps == 9


def test_zero_sample_fit_and_predict(rng):
    est = AdapterTransplanter(teacher=_teacher(), steps=20).fit()
    assert est.n_samples_seen_ == 0 and est.frozen_audit()
    X = rng.standard_normal((5, 8, 8))
    proba = est.predict_proba(X)
    assert proba.shape == (5, 2) and np.allclose(proba.sum(axis=1), 1)
    assert np.array_equal(est.predict(X), proba.argmax(axis=1))
    y = est.predict(X)
    assert est.score(X, y) == 1.0


def test_labeled_fit_and_seg_predict(rng):
    teacher = _teacher("seg")
    X = rng.standard_normal((6, 1, 8, 8))
    masks = (rng.uniform(size=(6, 1, 8, 8)) < 0.3).astype(np.float32)
    est = AdapterTransplanter(teacher=teacher, strategy="direct-learn", steps=5).fit(X, masks)
    pred = est.predict(X)
    assert pred.shape == (6, 1, 8, 8) and set(np.unique(pred)) <= {0, 1}
    assert 0.0 <= est.score(X, masks) <= 1.0
    assert est.score(X, pred) == 1.0


def test_fit_is_deterministic(rng):
    X = rng.standard_normal((4, 1, 8, 8))
    y = np.array([0, 1, 1, 0])
    a = AdapterTransplanter(teacher=_teacher(), steps=10, random_state=3).fit(X, y)
    b = AdapterTransplanter(teacher=_teacher(), steps=10, random_state=3).fit(X, y)
    assert a.adapter_.param_hash() == b.adapter_.param_hash()


def test_input_validation(rng):
    with pytest.raises(NotFittedError):
        AdapterTransplanter(teacher=_teacher()).predict(np.zeros((1, 8, 8)))
    with pytest.raises(TypeError):
        AdapterTransplanter(teacher="disk").fit()
    est = AdapterTransplanter(teacher=_teacher(), steps=2)
    with pytest.raises(ValueError, match="labels are required"):
        est.fit(np.zeros((2, 8, 8)))
    with pytest.raises(ValueError, match="labels"):
        est.fit(np.zeros((2, 8, 8)), [0])
    with pytest.raises(ValueError, match="shaped"):
        est.fit(np.zeros((2, 1, 9, 9)), [0, 1])
    with pytest.raises(ValueError):
        est.fit(np.full((2, 8, 8), np.nan), [0, 1])
    with pytest.raises(ValueError, match="at least one labeled"):
        AdapterTransplanter(teacher=_teacher(), strategy="distill").fit()
