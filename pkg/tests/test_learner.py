import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sapolab import SegmentPolicyLearner
from sapolab.segmentation import Segmenter
from sapolab.synthetic import SMALL_ENV


def small(**kw):
    base = dict(total_steps=3, batch_size=16, minibatch_count=2, window=2, n_features=64)
    base.update(kw)
    return SegmentPolicyLearner(**base)


def test_params_roundtrip_and_clone():
    est = small(algo="ppo", k_percent=50.0)
    params = est.get_params()
    assert params["algo"] == "ppo" and params["k_percent"] == 50.0
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(epsilon=0.1)
    assert est.epsilon == 0.1 and twin.epsilon == 0.2


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        small().predict([])


def test_fit_predict_score():
    est = small().fit(SMALL_ENV)
    assert len(est.metrics_) == 3 and est.state_.step == 3
    assert est.config_.env == SMALL_ENV
    env = est.state_.env
    states = [env.reset()]
    pred = est.predict(states)
    proba = est.predict_proba(states)
    assert pred.shape == (1,) and proba.shape == (1, SMALL_ENV.vocab_size)
    assert np.isclose(proba.sum(), 1.0) and pred[0] == np.argmax(proba[0])
    assert est.value(states).shape == (1,)
    assert 0.0 <= est.score() <= 1.0
    assert est.greedy_response().T >= 1


def test_fit_accepts_dict_and_is_deterministic():
    a = small().fit(SMALL_ENV.to_dict())
    b = small().fit(SMALL_ENV)
    assert [m.as_row() for m in a.metrics_] == [m.as_row() for m in b.metrics_]
    assert np.array_equal(a.state_.policy.weights, b.state_.policy.weights)


def test_learner_improves_chain_reward():
    est = SegmentPolicyLearner(total_steps=80, n_features=512).fit(
        {"kind": "chain-arith", "vocab_size": 12, "max_len": 5, "task_params": {"n_steps": 5, "modulus": 10}})
    assert est.score() > est.metrics_[0].mean_reward


def test_segmenter_transformer():
    est = small().fit(SMALL_ENV)
    batch_trajs = [est.greedy_response()]
    segs = Segmenter(k_percent=100.0).fit_transform(batch_trajs)
    assert segs[0].M == batch_trajs[0].T
    assert clone(Segmenter(kind="fixed-step", step_len=2)).get_params()["step_len"] == 2
