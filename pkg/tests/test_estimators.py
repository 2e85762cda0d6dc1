import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from twopass import estimators
from twopass.estimators import LasRescorer, TransducerASR
from twopass.frontend import default_dataset_config, synth_dataset


@pytest.fixture(scope="module")
def data():
    cfg = default_dataset_config()
    return synth_dataset(cfg, seed=1, count=24), synth_dataset(cfg, seed=5, count=6)


@pytest.fixture(scope="module")
def fitted(data):
    return TransducerASR(max_steps=4, batch_size=8).fit(data[0])


def test_params_round_trip():
    est = TransducerASR(max_steps=7, beam_size=3)
    assert est.get_params()["max_steps"] == 7
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(learning_rate=0.5)
    assert est.learning_rate == 0.5


def test_unfitted_predict_raises(data):
    with pytest.raises(NotFittedError):
        TransducerASR().predict(data[1])


@pytest.mark.parametrize("bad", [[], [1, 2], "abc", None])
def test_input_validation(bad):
    with pytest.raises((TypeError, ValueError)):
        TransducerASR(max_steps=1).fit(bad)


def test_single_utterance_rejected(data):
    with pytest.raises(TypeError):
        TransducerASR(max_steps=1).fit(data[0][0])


@pytest.mark.parametrize("kw", [{"max_steps": 0}, {"learning_rate": -1.0}, {"beam_size": 1.5}])
def test_hyperparameter_validation(data, kw):
    with pytest.raises(ValueError):
        TransducerASR(**kw).fit(data[0][:2])


def test_fit_predict_transform_score(fitted, data):
    ev = data[1]
    assert len(fitted.loss_curve_) == 4
    hyps = fitted.predict(ev)
    assert len(hyps) == len(ev) and all(isinstance(h, list) for h in hyps)
    enc = fitted.transform(ev)
    assert len(enc) == len(ev) and all(e.ndim == 2 for e in enc)
    assert fitted.score(ev) <= 1.0


def test_fit_is_deterministic(data):
    a = TransducerASR(max_steps=2, batch_size=8).fit(data[0])
    b = TransducerASR(max_steps=2, batch_size=8).fit(data[0])
    assert a.loss_curve_ == b.loss_curve_
    np.testing.assert_array_equal(a.params_.out_w.data, b.params_.out_w.data)


def test_rescorer(fitted, data):
    rs = LasRescorer(fitted, lambda_las=0.0, max_steps=2).fit(data[0])
    ev = data[1]
    # lambda 0 keeps the first-pass ranking
    assert rs.score(ev) == pytest.approx(fitted.score(ev))
    assert len(rs.predict(ev)) == len(ev)


def test_rescorer_needs_fitted_first_pass(fitted, data):
    with pytest.raises(TypeError):
        LasRescorer(None).fit(data[0])
    with pytest.raises(NotFittedError):
        LasRescorer(TransducerASR()).fit(data[0])
    with pytest.raises(ValueError):
        LasRescorer(fitted, lambda_las=2.0).fit(data[0])


def test_module_exports():
    assert {"TransducerASR", "LasRescorer"} <= set(dir(estimators))
