import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gae_finite_sum
from sapolab.credit import (
    GaeParams,
    broadcast_to_tokens,
    compute_segment_credit,
    group_relative_advantages,
    segment_deltas,
    segment_gae,
    sparse_segment_rewards,
    token_gae,
)
from sapolab.exceptions import ConfigError, ContractError
from sapolab.segmentation import Segmentation


def test_delta_examples():
    assert np.allclose(segment_deltas([1.0], [0.3, 0.0], 1.0), [0.7], atol=1e-15)
    assert np.allclose(segment_deltas([0.0, 1.0], [0.2, 0.5, 0.0], 1.0), [0.3, 0.5], atol=1e-15)
    d = segment_deltas([0, 0, 0, 0], [0.4, 0.4, 0.4, 0.4, 0.4], 1.0)
    assert np.all(d[:-1] == 0)
    with pytest.raises(ContractError):
        segment_deltas([0, 1], [0.1, 0.2], 1.0)


def test_gae_worked_example():
    adv, ret = segment_gae([0.3, 0.5], GaeParams(1.0, 0.95), [0.2, 0.5])
    assert np.allclose(adv, [0.775, 0.5], atol=1e-15)
    assert np.allclose(ret, [0.975, 1.0], atol=1e-15)


def test_lambda_zero_is_td():
    d = np.array([0.1, -0.4, 0.25])
    assert np.array_equal(segment_gae(d, GaeParams(0.9, 0.0)), d)


def test_monte_carlo_limit():
    rng = np.random.default_rng(0)
    for _ in range(50):
        M = int(rng.integers(1, 20))
        r, v = rng.standard_normal(M), rng.standard_normal(M)
        credit = compute_segment_credit(r, v, Segmentation(tuple(range(1, M + 1))), GaeParams(1.0, 1.0))
        assert np.allclose(credit.returns, np.cumsum(r[::-1])[::-1], atol=1e-12)


def test_returns_minus_advantages_are_values():
    rng = np.random.default_rng(1)
    seg = Segmentation((2, 5, 6))
    v = rng.standard_normal(3)
    c = compute_segment_credit(sparse_segment_rewards(1.0, 3), v, seg, GaeParams(1.0, 0.9))
    assert np.max(np.abs(c.returns - c.advantages - v)) <= 1e-12
    assert list(c.rewards) == [0.0, 0.0, 1.0]
    json.dumps(c.to_record())


def test_broadcast_examples():
    assert list(broadcast_to_tokens([0.775, 0.5], Segmentation((2, 4)))) == [0.775, 0.775, 0.5, 0.5]
    assert list(broadcast_to_tokens([0.3], Segmentation((4,)))) == [0.3] * 4
    a = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(broadcast_to_tokens(a, Segmentation((1, 2, 3))), a)
    with pytest.raises(ContractError):
        broadcast_to_tokens([0.1], Segmentation((1, 2)))


@settings(max_examples=100, deadline=None)
@given(bounds=st.lists(st.integers(1, 40), min_size=1, max_size=10, unique=True))
def test_broadcast_piecewise_constant(bounds):
    seg = Segmentation(tuple(sorted(bounds)))
    adv = np.arange(seg.M, dtype=float)
    tok = broadcast_to_tokens(adv, seg)
    changes = {i + 1 for i in range(len(tok) - 1) if tok[i] != tok[i + 1]}
    assert changes == set(seg.end_boundaries[:-1])


def test_token_gae_examples():
    assert np.allclose(token_gae([1.0], [0.4, 0.0], GaeParams(1.0, 0.95)), [0.6], atol=1e-15)
    r = np.array([0.0, 0.5, 0.0, 1.0])
    assert np.allclose(token_gae(r, np.zeros(5), GaeParams(1.0, 1.0)), np.cumsum(r[::-1])[::-1], atol=1e-15)


def test_token_gae_equals_unit_segment_path():
    rng = np.random.default_rng(2)
    for _ in range(100):
        T = int(rng.integers(1, 30))
        r, v = rng.standard_normal(T), np.append(rng.standard_normal(T), 0.0)
        gae = GaeParams(float(rng.uniform()), float(rng.uniform()))
        seg = Segmentation.all_tokens(T)
        via_segments = broadcast_to_tokens(segment_gae(segment_deltas(r, v, gae.gamma), gae), seg)
        assert np.max(np.abs(via_segments - token_gae(r, v, gae))) <= 1e-15


def test_gae_matches_finite_sum():
    rng = np.random.default_rng(3)
    for _ in range(200):
        M = int(rng.integers(1, 65))
        d = rng.standard_normal(M)
        g, lam = float(rng.uniform()), float(rng.uniform())
        assert np.max(np.abs(segment_gae(d, GaeParams(g, lam)) - gae_finite_sum(d, g, lam))) <= 1e-12


def test_group_relative_examples():
    assert np.allclose(group_relative_advantages([1, 0, 1, 0], True), [1, -1, 1, -1], atol=1e-7)
    assert np.array_equal(group_relative_advantages([0.3, 0.3, 0.3], True), [0, 0, 0])
    assert np.array_equal(group_relative_advantages([1, 0], False), [0.5, -0.5])
    with pytest.raises(ContractError):
        group_relative_advantages([1.0], True)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=16), st.booleans())
def test_group_advantages_sum_to_zero(rewards, norm):
    assert abs(group_relative_advantages(rewards, norm).sum()) <= 1e-12 * max(1.0, len(rewards))


def test_gae_params_validation():
    with pytest.raises(ConfigError):
        GaeParams(1.1, 0.5)
    with pytest.raises(ConfigError):
        GaeParams(1.0, -0.1)
