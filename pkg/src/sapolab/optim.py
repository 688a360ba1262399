"""Clipped surrogate objectives and the rollout/update loop.

All objectives share one batch layout (:class:`Batch`): tokens of every
trajectory are concatenated, each token knows its trajectory and its global
segment id, and carries an aggregation weight. The default weight
``1 / (n_trajectories * T_i)`` averages tokens within a response, then
responses within the batch.

Gradients are assembled from per-token coefficients on the score function,
``grad = sum_i c_i * grad log pi(y_i | s_i)``:

* SAPO: ``c_i = w * A_m * s_m * [unclipped branch active]`` where ``s_m`` is the
  geometric-mean ratio of the token's segment. Every token of the segment
  shares ``s_m``, so the segment-averaged score times ``|z_m|`` tokens collapses
  to one coefficient per token.
* PPO / naive-IS / GRPO: ``c_t = w * A_t * r_t * [active]`` with per-token ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .credit import (
    GaeParams,
    compute_segment_credit,
    group_relative_advantages,
    sparse_segment_rewards,
    token_gae,
)
from .envs import Env, Trajectory, make_env
from .exceptions import ConfigError, ContractError, DivergenceError
from .policy import (
    FeatureSpec,
    PolicyParams,
    batch_logprobs,
    batch_score_grad,
    feature_matrix,
    init_policy,
    sample_batch,
)
from .segmentation import Segmentation, segment
from .value import ValueParams, init_value, value_feature_matrix, weighted_value_loss_and_grad

KL_KINDS = ("none", "k1-in-reward")


@dataclass(frozen=True)
class ClipConfig:
    epsilon: float = 0.2
    kl_coef: float = 0.0
    kl_kind: str = "none"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.kl_coef < 0:
            raise ConfigError("kl_coef must be non-negative")
        if self.kl_kind not in KL_KINDS:
            raise ConfigError(f"kl_kind must be one of {KL_KINDS}")


@dataclass(frozen=True, eq=False)
class RatioStats:
    segment_ratios: np.ndarray
    mean_logratios: np.ndarray
    token_logratios: np.ndarray
    segment_lengths: np.ndarray


def _segment_means(x: np.ndarray, seg_index: np.ndarray, seg_lengths: np.ndarray) -> np.ndarray:
    return np.bincount(seg_index, weights=x, minlength=len(seg_lengths)) / seg_lengths


def segment_ratio(new_logprobs, old_logprobs, seg: Segmentation) -> RatioStats:
    """Geometric-mean importance ratio of each segment, computed in log space."""
    new = np.asarray(new_logprobs, dtype=float)
    old = np.asarray(old_logprobs, dtype=float)
    if new.shape != old.shape or new.ndim != 1:
        raise ContractError("new and old log-probs must be equally long 1-d sequences")
    if seg.T != len(new):
        raise ContractError(f"segmentation covers {seg.T} tokens, log-probs have {len(new)}")
    x = new - old
    lengths = seg.lengths
    mu = _segment_means(x, seg.segment_ids(), lengths)
    return RatioStats(np.exp(mu), mu, x, lengths)


# batch layout


@dataclass(eq=False)
class Batch:
    trajectories: list
    segmentations: list
    phi: sp.csr_matrix
    tokens: np.ndarray
    old_logprobs: np.ndarray
    traj_index: np.ndarray
    seg_index: np.ndarray
    seg_lengths: np.ndarray
    seg_traj: np.ndarray
    seg_advantages: np.ndarray
    token_advantages: np.ndarray
    token_weights: np.ndarray

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)


def build_batch(
    trajectories: Sequence[Trajectory],
    segmentations: Sequence[Segmentation],
    seg_advantages: Sequence,
    feature_spec: FeatureSpec,
    token_advantages: Sequence | None = None,
    aggregation: str = "trajectory",
) -> Batch:
    """Flatten per-trajectory data into the shared token layout.

    ``token_advantages`` defaults to the segment advantages broadcast over
    each segment (SAPO, naive-IS); PPO and GRPO pass their own.
    """
    if not trajectories:
        raise ContractError("empty batch")
    if not len(trajectories) == len(segmentations) == len(seg_advantages):
        raise ContractError("trajectories, segmentations and advantages must align")
    n = len(trajectories)
    states, tokens, old, tidx, sidx, slen, straj, sadv, tadv, tw = ([] for _ in range(10))
    n_tok = sum(t.T for t in trajectories)
    offset = 0
    for i, (traj, seg) in enumerate(zip(trajectories, segmentations)):
        if seg.T != traj.T:
            raise ContractError(f"segmentation of trajectory {i} does not cover its {traj.T} tokens")
        a = np.asarray(seg_advantages[i], dtype=float)
        if a.shape != (seg.M,):
            raise ContractError(f"trajectory {i}: expected {seg.M} segment advantages")
        states.extend(traj.state_at(t) for t in range(traj.T))
        tokens.extend(traj.tokens)
        old.append(traj.old_logprobs)
        tidx.append(np.full(traj.T, i))
        sidx.append(offset + seg.segment_ids())
        slen.append(seg.lengths)
        straj.append(np.full(seg.M, i))
        sadv.append(a)
        if token_advantages is None:
            tadv.append(np.repeat(a, seg.lengths))
        else:
            ta = np.asarray(token_advantages[i], dtype=float)
            if ta.shape != (traj.T,):
                raise ContractError(f"trajectory {i}: expected {traj.T} token advantages")
            tadv.append(ta)
        w = 1.0 / (n * traj.T) if aggregation == "trajectory" else 1.0 / n_tok
        tw.append(np.full(traj.T, w))
        offset += seg.M
    return Batch(
        list(trajectories), list(segmentations), feature_matrix(feature_spec, states),
        np.asarray(tokens, dtype=np.int64), np.concatenate(old), np.concatenate(tidx),
        np.concatenate(sidx), np.concatenate(slen).astype(float), np.concatenate(straj),
        np.concatenate(sadv), np.concatenate(tadv), np.concatenate(tw),
    )


def subset_batch(batch: Batch, traj_ids: Sequence[int], aggregation: str = "trajectory") -> Batch:
    """Sub-batch of the given trajectories, re-indexed and re-weighted."""
    ids = [int(i) for i in traj_ids]
    tok_off = np.concatenate([[0], np.cumsum([t.T for t in batch.trajectories])])
    seg_off = np.concatenate([[0], np.cumsum([s.M for s in batch.segmentations])])
    trajs = [batch.trajectories[i] for i in ids]
    segs = [batch.segmentations[i] for i in ids]
    rows = np.concatenate([np.arange(tok_off[i], tok_off[i + 1]) for i in ids])
    srows = np.concatenate([np.arange(seg_off[i], seg_off[i + 1]) for i in ids])
    n, n_tok = len(ids), len(rows)
    lengths = np.array([t.T for t in trajs])
    seg_counts = np.array([s.M for s in segs])
    new_seg_off = np.concatenate([[0], np.cumsum(seg_counts)])
    tw = 1.0 / (n * lengths) if aggregation == "trajectory" else np.full(n, 1.0 / n_tok)
    return Batch(
        trajs, segs, batch.phi[rows], batch.tokens[rows], batch.old_logprobs[rows],
        np.repeat(np.arange(n), lengths),
        np.concatenate([new_seg_off[k] + s.segment_ids() for k, s in enumerate(segs)]),
        batch.seg_lengths[srows], np.repeat(np.arange(n), seg_counts),
        batch.seg_advantages[srows], batch.token_advantages[rows], np.repeat(tw, lengths),
    )


# objectives


def _clip_terms(ratio, adv, eps):
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    # ties go to the unclipped branch, so in-range ratios always carry gradient
    active = unclipped <= clipped
    return np.minimum(unclipped, clipped), active


def sapo_objective_and_grad(batch: Batch, params: PolicyParams, clip: ClipConfig):
    """Segment-ratio clipped surrogate, its gradient and diagnostics."""
    if batch.seg_advantages is None:
        raise ContractError("batch carries no segment credits")
    new_lp, logp = batch_logprobs(params, batch.phi, batch.tokens)
    x = new_lp - batch.old_logprobs
    mu = _segment_means(x, batch.seg_index, batch.seg_lengths)
    s = np.exp(mu)
    s_tok = s[batch.seg_index]
    adv = batch.seg_advantages[batch.seg_index]
    terms, active = _clip_terms(s_tok, adv, clip.epsilon)
    obj = float(np.sum(batch.token_weights * terms))
    # weight each segment's shared ratio gradient by its active token weight, spread over |z_m|
    # first element plus mean deviation: exact when weights are constant within a segment,
    # which keeps the on-policy gradient bitwise equal to the token-ratio one
    wa = batch.token_weights * active
    first = wa[np.flatnonzero(np.diff(batch.seg_index, prepend=-1))]
    seg_w = first + np.bincount(batch.seg_index, weights=wa - first[batch.seg_index], minlength=len(s)) / batch.seg_lengths
    coef = (seg_w * s * batch.seg_advantages)[batch.seg_index]
    grad = batch_score_grad(params, batch.phi, batch.tokens, coef, logp)
    diag = {
        "clip_frac": float(np.mean(np.abs(s_tok - 1.0) > clip.epsilon)),
        "mean_abs_mu": float(np.mean(np.abs(mu))),
    }
    return obj, grad, diag


def _token_ratio_objective(batch, params, clip, adv):
    new_lp, logp = batch_logprobs(params, batch.phi, batch.tokens)
    x = new_lp - batch.old_logprobs
    r = np.exp(x)
    terms, active = _clip_terms(r, adv, clip.epsilon)
    obj = float(np.sum(batch.token_weights * terms))
    coef = batch.token_weights * active * adv * r
    grad = batch_score_grad(params, batch.phi, batch.tokens, coef, logp)
    diag = {"clip_frac": float(np.mean(np.abs(r - 1.0) > clip.epsilon)), "mean_abs_mu": float(np.mean(np.abs(x)))}
    return obj, grad, diag


def ppo_objective_and_grad(batch: Batch, params: PolicyParams, clip: ClipConfig):
    """Token-ratio clipped surrogate over the batch's token advantages."""
    return _token_ratio_objective(batch, params, clip, batch.token_advantages)


def naive_is_objective_and_grad(batch: Batch, params: PolicyParams, clip: ClipConfig):
    """Segment advantages broadcast to tokens, corrected with per-token ratios."""
    return _token_ratio_objective(batch, params, clip, batch.seg_advantages[batch.seg_index])


OBJECTIVES = {
    "sapo": sapo_objective_and_grad,
    "ppo": ppo_objective_and_grad,
    "grpo": ppo_objective_and_grad,
    "naive-is": naive_is_objective_and_grad,
}


def apply_kl_reward_penalty(old_logprobs, ref_logprobs, terminal_reward: float, seg: Segmentation, clip: ClipConfig):
    """Segment rewards with the k1 KL estimate subtracted inside each segment."""
    M = seg.M
    sparse = sparse_segment_rewards(terminal_reward, M)
    if clip.kl_kind == "none":
        return sparse
    old = np.asarray(old_logprobs, dtype=float)
    ref = np.asarray(ref_logprobs, dtype=float)
    if old.shape != ref.shape or len(old) != seg.T:
        raise ContractError("old/ref log-probs must both cover the segmented response")
    k1 = old - ref
    per_seg = np.bincount(seg.segment_ids(), weights=k1, minlength=M)
    return sparse - clip.kl_coef * per_seg


# optimizer


@dataclass
class Adam:
    """Adam state for one flat parameter vector (minimizes)."""

    dim: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.dim)
        if self.v is None:
            self.v = np.zeros(self.dim)

    def copy(self) -> "Adam":
        return Adam(self.dim, self.beta1, self.beta2, self.eps, self.m.copy(), self.v.copy(), self.t)

    def step(self, x: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return x - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class SGD:
    """Plain gradient descent; paired with a decaying step size it averages noisy targets."""

    dim: int
    t: int = 0

    def copy(self) -> "SGD":
        return SGD(self.dim, self.t)

    def step(self, x: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        return x - lr * grad


# learner state and the update loop


@dataclass
class LearnerState:
    env: Env
    policy: PolicyParams
    value: ValueParams
    ref_policy: PolicyParams
    policy_opt: Adam
    value_opt: Adam | SGD
    step: int = 0

    def copy(self) -> "LearnerState":
        return LearnerState(self.env, self.policy.copy(), self.value.copy(), self.ref_policy,
                            self.policy_opt.copy(), self.value_opt.copy(), self.step)


METRIC_FIELDS = ("step", "mean_reward", "policy_obj", "value_loss", "mean_entropy",
                 "mean_resp_len", "clip_frac", "mean_abs_mu", "mean_M")


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_reward: float
    policy_obj: float
    value_loss: float
    mean_entropy: float
    mean_resp_len: float
    clip_frac: float
    mean_abs_mu: float
    mean_M: float

    def as_row(self) -> list:
        return [getattr(self, f) for f in METRIC_FIELDS]


def init_learner(config) -> LearnerState:
    env = make_env(config.env, config.env_seed)
    policy = init_policy(env, config.features)
    value = init_value(config.features, env.max_len)
    vopt = Adam(value.weights.size) if config.value_optimizer == "adam" else SGD(value.weights.size)
    return LearnerState(env, policy, value, policy.copy(), Adam(policy.weights.size), vopt)


def _lr(base: float, config, step: int) -> float:
    if config.lr_decay == "linear" and config.total_steps > 0:
        return base * max(0.0, 1.0 - step / config.total_steps)
    if config.lr_decay == "inverse-time":
        return base / (1.0 + step / config.lr_decay_steps)
    return base


def _segmentations(config, trajs):
    if config.algo in ("sapo", "naive-is"):
        return [segment(t, config.seg_strategy) for t in trajs]
    if config.algo == "ppo":
        return [Segmentation.all_tokens(t.T) for t in trajs]
    return [Segmentation((t.T,)) for t in trajs]


def _guard(name, value, state, extra=None):
    if not np.all(np.isfinite(value)):
        dump = {"step": state.step, "quantity": name, **(extra or {})}
        raise DivergenceError(f"non-finite {name} at step {state.step}", dump)


def collect(state: LearnerState, config):
    """Rollout and credit phase: sample under the frozen policy, segment, assign credit.

    Returns ``(batch, value_data)`` where ``value_data`` holds boundary-state
    features, return targets and per-trajectory ids (``None`` for GRPO).
    """
    env, fs = state.env, config.features
    rngs = [np.random.default_rng([config.seed, state.step, i]) for i in range(config.batch_size)]
    trajs = sample_batch(env, state.policy, rngs)
    segs = _segmentations(config, trajs)

    if config.algo == "grpo":
        rewards = np.array([t.reward for t in trajs])
        adv = np.concatenate([
            group_relative_advantages(rewards[g : g + config.group_size], config.normalize_std)
            for g in range(0, len(trajs), config.group_size)
        ])
        batch = build_batch(trajs, segs, [np.array([a]) for a in adv], fs, aggregation=config.aggregation)
        return batch, None

    boundary_states, owners = [], []
    for i, (traj, seg) in enumerate(zip(trajs, segs)):
        boundary_states.extend(traj.state_at(o) for o in seg.state_offsets())
        owners.append(np.full(seg.M, i))
    owners = np.concatenate(owners)
    vphi = value_feature_matrix(state.value, boundary_states)
    values = vphi @ state.value.weights

    if config.clip.kl_kind != "none":
        ref_lp = [batch_logprobs(state.ref_policy, feature_matrix(fs, [t.state_at(j) for j in range(t.T)]),
                                 np.asarray(t.tokens))[0] for t in trajs]
    seg_off = np.concatenate([[0], np.cumsum([s.M for s in segs])])
    seg_adv, tok_adv, targets = [], [], []
    for i, (traj, seg) in enumerate(zip(trajs, segs)):
        v = values[seg_off[i] : seg_off[i + 1]]
        if config.clip.kl_kind != "none":
            rewards = apply_kl_reward_penalty(traj.old_logprobs, ref_lp[i], traj.reward, seg, config.clip)
        else:
            rewards = sparse_segment_rewards(traj.reward, seg.M)
        if config.algo == "ppo":
            a = token_gae(rewards, np.append(v, 0.0), config.gae)
            seg_adv.append(a)
            tok_adv.append(a)
            targets.append(a + v)
        else:
            credit = compute_segment_credit(rewards, v, seg, config.gae)
            seg_adv.append(credit.advantages)
            tok_adv.append(credit.token_advantages)
            targets.append(credit.returns)
    batch = build_batch(trajs, segs, seg_adv, fs, token_advantages=tok_adv, aggregation=config.aggregation)
    return batch, {"phi": vphi, "targets": np.concatenate(targets), "owners": owners, "offsets": seg_off}


def train_step(state: LearnerState, config) -> tuple[LearnerState, StepMetrics]:
    """One outer iteration: rollout, segmentation, credit, then one pass over mini-batches."""
    batch, vdata = collect(state, config)
    new = state.copy()
    objective = OBJECTIVES[config.algo]
    perm = np.random.default_rng([config.seed, state.step, 2**31]).permutation(config.batch_size)
    lr_p = _lr(config.lr_policy, config, state.step)
    lr_v = _lr(config.lr_value, config, state.step)

    objs, vlosses, clip_fracs, mus = [], [], [], []
    for mb_ids in np.array_split(perm, config.minibatch_count):
        mb = subset_batch(batch, mb_ids, config.aggregation)
        obj, grad, diag = objective(mb, new.policy, config.clip)
        _guard("policy objective", [obj], new, {"minibatch": mb_ids.tolist()})
        _guard("policy gradient", grad, new)
        weights = new.policy_opt.step(new.policy.weights, -grad, lr_p)
        _guard("policy parameters", weights, new)
        new.policy = new.policy.with_weights(weights)
        objs.append(obj)
        clip_fracs.append(diag["clip_frac"])
        mus.append(diag["mean_abs_mu"])

        if vdata is not None:
            off = vdata["offsets"]
            rows = np.concatenate([np.arange(off[i], off[i + 1]) for i in mb_ids])
            counts = np.diff(off)
            # each response contributes the mean of its boundary losses
            w = 1.0 / (len(mb_ids) * counts[vdata["owners"][rows]])
            loss, vgrad = weighted_value_loss_and_grad(new.value, vdata["phi"][rows], vdata["targets"][rows], w)
            _guard("value loss", [loss], new)
            vweights = new.value_opt.step(new.value.weights, vgrad, lr_v)
            _guard("value parameters", vweights, new)
            new.value = new.value.with_weights(vweights)
            vlosses.append(loss)

    trajs = batch.trajectories
    metrics = StepMetrics(
        step=state.step,
        mean_reward=float(np.mean([t.reward for t in trajs])),
        policy_obj=float(np.mean(objs)),
        value_loss=float(np.mean(vlosses)) if vlosses else 0.0,
        mean_entropy=float(np.mean(np.concatenate([t.entropies for t in trajs]))),
        mean_resp_len=float(np.mean([t.T for t in trajs])),
        clip_frac=float(np.mean(clip_fracs)),
        mean_abs_mu=float(np.mean(mus)),
        mean_M=float(np.mean([s.M for s in batch.segmentations])),
    )
    new.step = state.step + 1
    return new, metrics
