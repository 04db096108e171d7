import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from h4vdm.errors import ShapeMismatch, SingleClass
from h4vdm.estimator import GopPairVerifier
from h4vdm.gop_store import assemble_model_input
from h4vdm.pairs import build_pairs, default_profiles, synth_generate


@pytest.fixture(scope="module")
def data():
    profiles = default_profiles(3, seed=1, height=32, width=32)
    recs = synth_generate(profiles, 1, 4)
    inputs = {r.key: assemble_model_input(r, 2, 32, 32) for r in recs}
    gbd = {}
    for r in recs:
        gbd.setdefault(r.device_id, []).append(r.key)
    pairs = build_pairs(gbd, gbd, 3, 6, 0)
    X = [(inputs[p.a], inputs[p.b]) for p in pairs]
    y = np.array([p.label for p in pairs])
    return X, y, list(inputs.values())


def make(**kw):
    return GopPairVerifier(preset="micro", batch_size=8, base_lr=1e-3, warmup_epochs=0,
                           max_epochs=2, val_fraction=0.25, **kw)


def test_params_and_clone():
    est = make(seed=3)
    params = est.get_params()
    assert params["seed"] == 3 and params["preset"] == "micro"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(max_epochs=5)
    assert est.max_epochs == 5


def test_not_fitted(data):
    X, _, flat = data
    est = make()
    for call in (lambda: est.predict(X), lambda: est.transform(flat), lambda: est.decision_function(X)):
        with pytest.raises(NotFittedError):
            call()


def test_fit_predict(data):
    X, y, flat = data
    est = make().fit(X, y)
    assert hasattr(est, "threshold_") and est.best_epoch_ in (0, 1)
    s = est.decision_function(X)
    assert s.shape == (len(X),) and ((0 <= s) & (s <= 1)).all()
    assert set(np.unique(est.predict(X))) <= {0, 1}
    assert 0.0 <= est.score(X, y) <= 1.0
    feats = est.transform(flat)
    assert feats.shape == (len(flat), est.model_.config.d_r)
    # fitting is deterministic given the seed
    again = make().fit(X, y)
    assert np.array_equal(again.decision_function(X), s)


def test_fixed_threshold(data):
    X, y, _ = data
    assert make(threshold=0.5).fit(X, y).threshold_ == 0.5


def test_input_checks(data):
    X, y, flat = data
    with pytest.raises(SingleClass):
        make().fit(X, np.ones(len(X)))
    with pytest.raises(ShapeMismatch):
        make().fit(X, y[:-1])
    wrong = assemble_model_input(synth_generate(default_profiles(1, seed=5), 1, 1)[0], 2, 48, 48)
    with pytest.raises(ShapeMismatch):
        make().fit([(wrong, wrong)] + X[1:], y)
