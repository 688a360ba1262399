"""Estimator-style wrapper around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .credit import GaeParams
from .envs import EnvSpec, make_env
from .optim import ClipConfig, init_learner, train_step
from .policy import FeatureSpec, greedy_trajectory, logits, sample_batch
from .segmentation import SegStrategy
from .value import predict as value_predict


class SegmentPolicyLearner(BaseEstimator):
    """Train a linear softmax policy on a token environment.

    Parameters
    ----------
    algo : {"sapo", "ppo", "grpo", "naive-is"}, default="sapo"
    k_percent : float, default=30.0
        Entropy top-k percentage used to place segment boundaries.
    total_steps, batch_size, minibatch_count : int
    lr_policy, lr_value : float
    epsilon : float, default=0.2
        Clip range of the importance ratio.
    gamma, lam : float
        Discount and GAE decay.
    group_size : int, default=8
        Group size for the group-relative baseline.
    window, n_features : int
        Hashed feature layout shared by policy and value.
    seed : int, default=0

    Attributes
    ----------
    config_ : RunConfig
    state_ : LearnerState
    metrics_ : list of StepMetrics

    Examples
    --------
    >>> from sapolab.envs import EnvSpec
    >>> est = SegmentPolicyLearner(total_steps=3, batch_size=8, minibatch_count=2)
    >>> est = est.fit(EnvSpec("tiny-tree", 2, 3))
    >>> len(est.metrics_)
    3
    """

    def __init__(self, algo="sapo", k_percent=30.0, total_steps=200, batch_size=64, minibatch_count=4,
                 lr_policy=1e-2, lr_value=1e-2, epsilon=0.2, gamma=1.0, lam=0.99, group_size=8,
                 window=2, n_features=512, seed=0):
        self.algo = algo
        self.k_percent = k_percent
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.minibatch_count = minibatch_count
        self.lr_policy = lr_policy
        self.lr_value = lr_value
        self.epsilon = epsilon
        self.gamma = gamma
        self.lam = lam
        self.group_size = group_size
        self.window = window
        self.n_features = n_features
        self.seed = seed

    def _make_config(self, env_spec: EnvSpec, env_seed: int) -> RunConfig:
        return RunConfig(
            env=env_spec, env_seed=env_seed, algo=self.algo,
            seg_strategy=SegStrategy("entropy-topk", k_percent=self.k_percent),
            gae=GaeParams(self.gamma, self.lam), clip=ClipConfig(self.epsilon),
            features=FeatureSpec(self.window, self.n_features), group_size=self.group_size,
            batch_size=self.batch_size, minibatch_count=self.minibatch_count, total_steps=self.total_steps,
            lr_policy=self.lr_policy, lr_value=self.lr_value, seed=self.seed,
        )

    def fit(self, X, y=None, env_seed=0):
        """``X`` is an :class:`EnvSpec` (or its dict form); ``y`` is ignored."""
        spec = X if isinstance(X, EnvSpec) else EnvSpec.from_dict(X)
        self.config_ = self._make_config(spec, env_seed)
        state = init_learner(self.config_)
        self.metrics_ = []
        for _ in range(self.total_steps):
            state, m = train_step(state, self.config_)
            self.metrics_.append(m)
        self.state_ = state
        return self

    def predict(self, states):
        """Greedy next token for each episode state."""
        check_is_fitted(self, "state_")
        return np.array([int(np.argmax(logits(self.state_.policy, s).logprobs)) for s in states])

    def predict_proba(self, states):
        check_is_fitted(self, "state_")
        return np.array([logits(self.state_.policy, s).probs for s in states])

    def value(self, states):
        check_is_fitted(self, "state_")
        return np.array([value_predict(self.state_.value, s) for s in states])

    def score(self, X=None, y=None, n_samples=256, seed=12345):
        """Mean terminal reward of sampled responses on the fitted environment."""
        check_is_fitted(self, "state_")
        env = self.state_.env if X is None else make_env(X, self.config_.env_seed)
        rngs = [np.random.default_rng([seed, i]) for i in range(n_samples)]
        return float(np.mean([t.reward for t in sample_batch(env, self.state_.policy, rngs)]))

    def greedy_response(self):
        check_is_fitted(self, "state_")
        return greedy_trajectory(self.state_.env, self.state_.policy)
