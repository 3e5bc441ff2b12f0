import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bnndense.data import gen_dataset, stack
from bnndense.estimator import BinarySegmenter
from bnndense.exceptions import DataError, ShapeError

FAST = dict(K=2, widths=(4, 4, 6, 6), epochs_float=1, epochs_binary=1, batch_size=4)


@pytest.fixture(scope="module")
def toy():
    return stack(gen_dataset(11, 10, 16))


@pytest.fixture(scope="module")
def fitted(toy):
    X, y = toy
    return BinarySegmenter(**FAST, validation_fraction=0.2).fit(X, y)


def test_params_roundtrip_through_clone():
    est = BinarySegmenter(K=3, lr=5e-4)
    params = clone(est).get_params()
    assert params["K"] == 3 and params["lr"] == 5e-4
    assert set(params) == set(BinarySegmenter().get_params())


def test_fit_predict_shapes(fitted, toy):
    X, y = toy
    assert fitted.classes_.tolist() == [0, 1] and fitted.n_features_in_ == 3
    proba = fitted.predict_proba(X)
    assert proba.shape == (10, 2, 16, 16)
    assert np.allclose(proba.sum(axis=1), 1.0)
    pred = fitted.predict(X)
    assert pred.shape == y.shape and set(np.unique(pred)) <= {0, 1}
    assert 0.0 <= fitted.score(X, y) <= 1.0
    assert [e.stage for e in fitted.history_] == ["float", "binary"]


def test_fit_is_deterministic(fitted, toy):
    X, y = toy
    again = BinarySegmenter(**FAST, validation_fraction=0.2).fit(X, y)
    assert again.to_bytes() == fitted.to_bytes()


def test_bytes_roundtrip(fitted, toy):
    X, _ = toy
    back = BinarySegmenter.from_bytes(fitted.to_bytes())
    assert back.predict_proba(X).tobytes() == fitted.predict_proba(X).tobytes()
    assert back.K == 2 and tuple(back.widths) == (4, 4, 6, 6)


def test_input_validation(toy):
    X, y = toy
    with pytest.raises(NotFittedError):
        BinarySegmenter().predict(X)
    with pytest.raises(ShapeError):
        BinarySegmenter(**FAST).fit(X[:, 0], y)
    with pytest.raises(ShapeError):
        BinarySegmenter(**FAST).fit(X, y[:5])
    with pytest.raises(DataError):
        BinarySegmenter(**FAST).fit(X, y + 0.5)
    with pytest.raises(DataError):
        BinarySegmenter(**FAST).fit(X, y - 1)
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        BinarySegmenter(**FAST).fit(bad, y)
    with pytest.raises(ValueError):
        BinarySegmenter(**FAST, validation_fraction=1.0).fit(X, y)


def test_score_rejects_weights(fitted, toy):
    X, y = toy
    with pytest.raises(ValueError):
        fitted.score(X, y, sample_weight=np.ones(len(X)))
