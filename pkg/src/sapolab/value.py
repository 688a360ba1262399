"""Linear state-value function evaluated at segment-boundary states."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .credit import GaeParams, compute_segment_credit, sparse_segment_rewards
from .envs import Env, EpisodeState, enumerate_trajectories
from .exceptions import ConfigError, ContractError
from .policy import FeatureSpec, feature_indices
from .segmentation import SegStrategy, segment


@dataclass
class ValueParams:
    weights: np.ndarray
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    horizon: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.feature_spec.n_features + 1,):
            raise ConfigError(f"value weights must have length {self.feature_spec.n_features + 1}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not np.all(np.isfinite(self.weights)):
            raise ContractError("value weights must be finite")

    def copy(self) -> "ValueParams":
        return ValueParams(self.weights.copy(), self.feature_spec, self.horizon)

    def with_weights(self, weights) -> "ValueParams":
        return ValueParams(weights, self.feature_spec, self.horizon)


def init_value(feature_spec: FeatureSpec, horizon: int) -> ValueParams:
    return ValueParams(np.zeros(feature_spec.n_features + 1), feature_spec, horizon)


def value_feature_matrix(vparams: ValueParams, states: Sequence[EpisodeState]) -> sp.csr_matrix:
    """Policy features plus a trailing ``t / horizon`` column."""
    F = vparams.feature_spec.n_features
    rows = [feature_indices(vparams.feature_spec, s) for s in states]
    indices, data, indptr = [], [], [0]
    for s, r in zip(states, rows):
        indices.append(r)
        data.append(np.ones(len(r)))
        pos = s.t / vparams.horizon
        if pos != 0.0:
            indices.append(np.array([F]))
            data.append(np.array([pos]))
        indptr.append(indptr[-1] + len(r) + (pos != 0.0))
    if rows:
        indices, data = np.concatenate(indices), np.concatenate(data)
    else:
        indices, data = np.zeros(0, dtype=np.int64), np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), F + 1))


def predict(vparams: ValueParams, state: EpisodeState) -> float:
    return float((value_feature_matrix(vparams, [state]) @ vparams.weights)[0])


def weighted_value_loss_and_grad(vparams: ValueParams, phi: sp.csr_matrix, targets, weights):
    """``sum_i w_i (V(s_i) - R_i)^2`` and its gradient."""
    resid = phi @ vparams.weights - np.asarray(targets, dtype=float)
    w = np.asarray(weights, dtype=float)
    loss = float(np.sum(w * resid**2))
    grad = np.asarray(phi.T @ (2.0 * w * resid)).ravel()
    return loss, grad


def value_loss_and_grad(vparams: ValueParams, boundary_states: Sequence[EpisodeState], returns):
    """Mean squared error over the segment-boundary states of one response.

    Only the supplied boundary states enter the loss; every other prefix of
    the response contributes nothing to it or its gradient.
    """
    returns = np.asarray(returns, dtype=float)
    M = len(boundary_states)
    if M == 0:
        raise ContractError("value loss needs at least one boundary state")
    if returns.shape != (M,):
        raise ContractError(f"expected {M} returns, got shape {returns.shape}")
    phi = value_feature_matrix(vparams, boundary_states)
    return weighted_value_loss_and_grad(vparams, phi, returns, np.full(M, 1.0 / M))


class LinearValueFunction(RegressorMixin, BaseEstimator):
    """Least-squares fit of the linear value function.

    Parameters
    ----------
    window : int, default=2
        Number of trailing context tokens hashed into features.
    n_features : int, default=512
        Hashed feature dimension.
    horizon : int, default=1
        Normalizer of the position feature (usually the env's ``max_len``).
    alpha : float, default=0.0
        Ridge penalty; 0 gives the minimum-norm least-squares solution.

    Examples
    --------
    >>> from sapolab.envs import EnvSpec, make_env
    >>> env = make_env(EnvSpec("tiny-tree", 2, 3), seed=0)
    >>> vf = LinearValueFunction(horizon=3).fit([env.reset()], [0.125])
    >>> round(vf.predict([env.reset()])[0], 6)
    0.125
    """

    def __init__(self, window=2, n_features=512, horizon=1, alpha=0.0):
        self.window = window
        self.n_features = n_features
        self.horizon = horizon
        self.alpha = alpha

    def fit(self, states, returns, sample_weight=None):
        states = list(states)
        y = np.asarray(returns, dtype=float)
        if len(states) == 0 or y.shape != (len(states),):
            raise ContractError("states and returns must be non-empty and equally long")
        w = np.ones(len(states)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        params = init_value(FeatureSpec(self.window, self.n_features), self.horizon)
        X = value_feature_matrix(params, states).toarray()
        sw = np.sqrt(w)[:, None]
        A, b = X * sw, y * sw[:, 0]
        if self.alpha > 0:
            d = X.shape[1]
            A = np.vstack([A, np.sqrt(self.alpha) * np.eye(d)])
            b = np.concatenate([b, np.zeros(d)])
        coef, *_ = np.linalg.lstsq(A, b, rcond=None)
        self.params_ = params.with_weights(coef)
        return self

    def predict(self, states):
        check_is_fitted(self, "params_")
        return value_feature_matrix(self.params_, list(states)) @ self.params_.weights


def value_fit(env: Env, policy_eval, strategy: SegStrategy, gae: GaeParams | None = None,
              feature_spec: FeatureSpec | None = None, max_iter: int = 200, tol: float = 1e-12,
              alpha: float = 0.0) -> LinearValueFunction:
    """Minimize the expected boundary-state value loss under a frozen policy.

    Every trajectory is enumerated with its probability, segmented, and its
    boundary states are weighted ``p / M`` (the per-response mean of the
    training loss). Returns targets depend on the current values whenever
    ``lambda < 1``, so fitting alternates target computation and a weighted
    least-squares solve until the fitted boundary values stop moving.
    """
    gae = gae or GaeParams()
    fs = feature_spec or FeatureSpec()
    pairs = [(t, p) for t, p in enumerate_trajectories(env, policy_eval) if p > 0]
    segs = [segment(t, strategy) for t, _ in pairs]
    states, weights, spans = [], [], [0]
    for (traj, prob), seg in zip(pairs, segs):
        states.extend(traj.state_at(o) for o in seg.state_offsets())
        weights.extend([prob / seg.M] * seg.M)
        spans.append(len(states))
    weights = np.asarray(weights)
    model = LinearValueFunction(fs.window, fs.n_features, env.max_len, alpha)
    values = np.zeros(len(states))
    for _ in range(max_iter):
        targets = np.concatenate([
            compute_segment_credit(sparse_segment_rewards(traj.reward, seg.M),
                                   values[spans[i]:spans[i + 1]], seg, gae).returns
            for i, ((traj, _), seg) in enumerate(zip(pairs, segs))
        ])
        model.fit(states, targets, sample_weight=weights)
        new_values = model.predict(states)
        done = np.max(np.abs(new_values - values)) <= tol
        values = new_values
        if done:
            break
    return model
