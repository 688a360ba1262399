"""Random off-policy batches for degeneracy and gradient checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .credit import broadcast_to_tokens
from .envs import EnvSpec, make_env
from .optim import Batch, build_batch
from .policy import FeatureSpec, PolicyParams, init_policy, sample_batch
from .segmentation import SegStrategy, segment
from .value import ValueParams, init_value

SMALL_ENV = EnvSpec("chain-arith", vocab_size=12, max_len=5, task_params={"n_steps": 3, "modulus": 10})
SMALL_FEATURES = FeatureSpec(window=2, n_features=64)


@dataclass(eq=False)
class OffPolicyCase:
    batch: Batch
    old: PolicyParams
    new: PolicyParams


def random_offpolicy_batch(seed: int, k_percent: float = 30.0, n_traj: int = 8, perturb: float = 0.3,
                           env_spec: EnvSpec = SMALL_ENV, features: FeatureSpec = SMALL_FEATURES,
                           aggregation: str = "trajectory") -> OffPolicyCase:
    """Trajectories sampled from a random behaviour policy, scored at a perturbed one.

    Segment advantages are standard normal and broadcast to tokens, so the
    token-ratio objectives see the same advantages as the segment objective.
    """
    rng = np.random.default_rng(seed)
    env = make_env(env_spec, seed)
    base = init_policy(env, features)
    old = base.with_weights(base.weights + 0.5 * rng.standard_normal(base.weights.size))
    trajs = sample_batch(env, old, [np.random.default_rng([seed, i]) for i in range(n_traj)])
    strategy = SegStrategy("entropy-topk", k_percent=k_percent)
    segs = [segment(t, strategy) for t in trajs]
    seg_adv = [rng.standard_normal(s.M) for s in segs]
    tok_adv = [broadcast_to_tokens(a, s) for a, s in zip(seg_adv, segs)]
    batch = build_batch(trajs, segs, seg_adv, features, token_advantages=tok_adv, aggregation=aggregation)
    new = old.with_weights(old.weights + perturb * rng.standard_normal(old.weights.size))
    return OffPolicyCase(batch, old, new)


def random_value_problem(seed: int, env_spec: EnvSpec = SMALL_ENV, features: FeatureSpec = SMALL_FEATURES,
                         n_traj: int = 4, k_percent: float = 30.0):
    """(value params, boundary states, returns) for value-loss gradient checks."""
    rng = np.random.default_rng(seed)
    env = make_env(env_spec, seed)
    policy = init_policy(env, features)
    trajs = sample_batch(env, policy, [np.random.default_rng([seed, 7, i]) for i in range(n_traj)])
    strategy = SegStrategy("entropy-topk", k_percent=k_percent)
    states = []
    for t in trajs:
        states.extend(t.state_at(o) for o in segment(t, strategy).state_offsets())
    v0 = init_value(features, env.max_len)
    vparams = ValueParams(rng.standard_normal(v0.weights.size), features, env.max_len)
    return vparams, states, rng.standard_normal(len(states))
