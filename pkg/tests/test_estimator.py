import numpy as np
import pytest
from sklearn.base import clone
from sklearn.model_selection import cross_val_score

from pararev import ParaRevSNNClassifier
from pararev._validation import NotFittedError
from pararev.training import synth_task


@pytest.fixture(scope="module")
def data():
    d = synth_task(0, classes=2, size=128)
    labels = np.array(["cat", "dog"])[d.y]
    return d.X, labels


def small(**kw):
    base = dict(blocks=(1,), widths=(8,), timesteps=2, epochs=3, batch_size=32, random_state=0)
    base.update(kw)
    return ParaRevSNNClassifier(**base)


def test_fit_predict_with_string_labels(data):
    X, y = data
    clf = small(widths=(16,), epochs=6).fit(X, y)
    assert list(clf.classes_) == ["cat", "dog"]
    pred = clf.predict(X)
    assert set(pred) <= {"cat", "dog"}
    assert clf.score(X, y) >= 0.9
    proba = clf.predict_proba(X)
    assert proba.shape == (len(X), 2)
    np.testing.assert_allclose(proba.sum(1), 1, rtol=1e-6)
    assert clf.n_features_in_ == 3 * 8 * 8


def test_get_set_params_and_clone():
    clf = small(flavor="baseline")
    params = clf.get_params()
    assert params["flavor"] == "baseline" and params["epochs"] == 3
    c2 = clone(clf).set_params(flavor="pararev-fused", blocks=(2,))
    assert c2.flavor == "pararev-fused" and clf.flavor == "baseline"


def test_same_seed_same_model(data):
    X, y = data
    a = small().fit(X, y).decision_function(X)
    b = small().fit(X, y).decision_function(X)
    assert a.tobytes() == b.tobytes()


def test_not_fitted_and_input_errors(data):
    X, y = data
    with pytest.raises(NotFittedError):
        small().predict(X)
    with pytest.raises(ValueError):
        small().fit(X, y[:-1])
    with pytest.raises(ValueError):
        small().fit(X, np.full(len(X), "cat"))
    clf = small(epochs=1).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :, :4, :4])


def test_cross_val_score(data):
    X, y = data
    scores = cross_val_score(small(epochs=2), X, y, cv=2)
    assert scores.shape == (2,) and (scores >= 0).all()
