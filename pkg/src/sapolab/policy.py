"""Linear softmax policy over hashed context features.

Logits are ``W @ phi(state)`` where ``phi`` is a sparse binary vector built from
the response position and the last ``window`` context tokens. Because the
model is linear in ``W`` the score function has the closed form
``(onehot(token) - softmax(logits)) outer phi``, which keeps every gradient in
the package exact.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .envs import Env, EpisodeState, Trajectory
from .exceptions import ConfigError, ContractError

PAD = -1


@dataclass(frozen=True)
class FeatureSpec:
    window: int = 2
    n_features: int = 512

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("feature window must be >= 1")
        if self.n_features < 8:
            raise ConfigError("n_features must be >= 8")


def _bucket(key, n_features: int) -> int:
    # index 0 is reserved for the always-on bias feature
    return 1 + zlib.crc32(repr(key).encode()) % (n_features - 1)


@lru_cache(maxsize=200_000)
def _feature_indices(window_tokens: tuple, t: int, n_features: int) -> np.ndarray:
    keys = [("pos", t), ("ngram", window_tokens), ("pos_last", t, window_tokens[-1])]
    keys += [("tok", j, tok) for j, tok in enumerate(reversed(window_tokens), start=1)]
    idx = np.unique([0] + [_bucket(k, n_features) for k in keys])
    idx.setflags(write=False)
    return idx


def feature_indices(spec: FeatureSpec, state: EpisodeState) -> np.ndarray:
    """Sorted active feature indices of ``state`` (binary features)."""
    ctx = state.context[-spec.window:]
    window_tokens = (PAD,) * (spec.window - len(ctx)) + tuple(ctx)
    return _feature_indices(window_tokens, state.t, spec.n_features)


def feature_matrix(spec: FeatureSpec, states: Sequence[EpisodeState]) -> sp.csr_matrix:
    """Binary CSR matrix with one row of features per state."""
    rows = [feature_indices(spec, s) for s in states]
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    data = np.ones(len(indices))
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), spec.n_features))


@dataclass
class PolicyParams:
    weights: np.ndarray
    vocab_size: int
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        expected = self.vocab_size * self.feature_spec.n_features
        if self.weights.shape != (expected,):
            raise ConfigError(f"policy weights must be a flat vector of length {expected}")
        if not np.all(np.isfinite(self.weights)):
            raise ContractError("policy weights must be finite")

    @property
    def W(self) -> np.ndarray:
        return self.weights.reshape(self.vocab_size, self.feature_spec.n_features)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.vocab_size, self.feature_spec)

    def with_weights(self, weights) -> "PolicyParams":
        return PolicyParams(weights, self.vocab_size, self.feature_spec)


def init_policy(env: Env, feature_spec: FeatureSpec | None = None) -> PolicyParams:
    """Zero weights plus the environment's initial logit bias on the bias feature."""
    fs = feature_spec or FeatureSpec()
    W = np.zeros((env.vocab_size, fs.n_features))
    W[:, 0] = env.logit_bias
    return PolicyParams(W.ravel(), env.vocab_size, fs)


@dataclass(frozen=True)
class TokenDistribution:
    logits: np.ndarray
    logprobs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logprobs)

    @property
    def entropy(self) -> float:
        return float(_entropies(self.logprobs[None, :], len(self.logprobs))[0])


def _entropies(logp: np.ndarray, vocab_size: int) -> np.ndarray:
    p = np.exp(logp)
    h = -np.sum(np.where(p > 0, p * logp, 0.0), axis=1)
    return np.clip(h, 0.0, math.log(vocab_size))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    return z - logsumexp(z, axis=-1, keepdims=True)


def logits(params: PolicyParams, state: EpisodeState) -> TokenDistribution:
    if state.done:
        raise ContractError("no next-token distribution at a terminal state")
    idx = feature_indices(params.feature_spec, state)
    z = params.W[:, idx].sum(axis=1)
    return TokenDistribution(z, _log_softmax(z))


def token_entropy(params: PolicyParams, state: EpisodeState) -> float:
    """Shannon entropy (nats) of the next-token distribution."""
    return logits(params, state).entropy


def token_logprob_and_grad(params: PolicyParams, state: EpisodeState, token: int):
    """``log pi(token | state)`` and its gradient with respect to the flat weights."""
    if not 0 <= token < params.vocab_size:
        raise ContractError(f"token {token} outside vocabulary")
    idx = feature_indices(params.feature_spec, state)
    dist = logits(params, state)
    g = np.zeros((params.vocab_size, params.feature_spec.n_features))
    coef = -dist.probs
    coef[token] += 1.0
    g[:, idx] = coef[:, None]
    return float(dist.logprobs[token]), g.ravel()


def policy_eval(params: PolicyParams):
    """Adapter for the enumeration oracles: state -> probability vector."""
    return lambda state: logits(params, state).probs


# batched primitives used by the objectives


def batch_logprobs(params: PolicyParams, phi: sp.csr_matrix, tokens: np.ndarray):
    """Per-row log-prob of ``tokens`` and the full log-softmax matrix."""
    z = np.asarray(phi @ params.W.T)
    logp = _log_softmax(z)
    return logp[np.arange(len(tokens)), tokens], logp


def batch_score_grad(params: PolicyParams, phi: sp.csr_matrix, tokens: np.ndarray, coef: np.ndarray, logp=None):
    """``sum_i coef_i * grad log pi(tokens_i | state_i)`` as a flat vector."""
    if logp is None:
        _, logp = batch_logprobs(params, phi, tokens)
    d = -np.exp(logp) * coef[:, None]
    d[np.arange(len(tokens)), tokens] += coef
    return np.asarray(phi.T @ d).T.ravel()


def sample_batch(env: Env, params: PolicyParams, rngs: Sequence[np.random.Generator]) -> list[Trajectory]:
    """Sample one trajectory per generator, advancing all episodes in lockstep.

    Each row's logits depend only on its own state, so the result for stream
    ``i`` is identical to ``sample_trajectory(env, params, rngs[i])``.
    """
    n = len(rngs)
    states = [env.reset() for _ in range(n)]
    lps = [[] for _ in range(n)]
    ents = [[] for _ in range(n)]
    active = list(range(n))
    W = params.W
    while active:
        phi = feature_matrix(params.feature_spec, [states[i] for i in active])
        logp = _log_softmax(np.asarray(phi @ W.T))
        h = _entropies(logp, params.vocab_size)
        cdf = np.cumsum(np.exp(logp), axis=1)
        still = []
        for j, i in enumerate(active):
            u = rngs[i].random() * cdf[j, -1]
            tok = min(int(np.searchsorted(cdf[j], u, side="right")), params.vocab_size - 1)
            lps[i].append(float(logp[j, tok]))
            ents[i].append(float(h[j]))
            states[i] = env.step(states[i], tok)
            if not states[i].done:
                still.append(i)
        active = still
    out = []
    for i, s in enumerate(states):
        out.append(Trajectory(s.prompt, s.generated, lps[i], ents[i], env.verify(s.generated)))
    return out


def sample_trajectory(env: Env, params: PolicyParams, rng: np.random.Generator) -> Trajectory:
    return sample_batch(env, params, [rng])[0]


def greedy_trajectory(env: Env, params: PolicyParams) -> Trajectory:
    """Argmax decoding (ties to the smaller token id)."""
    state = env.reset()
    lps, ents = [], []
    while not state.done:
        dist = logits(params, state)
        tok = int(np.argmax(dist.logprobs))
        lps.append(float(dist.logprobs[tok]))
        ents.append(dist.entropy)
        state = env.step(state, tok)
    return Trajectory(state.prompt, state.generated, lps, ents, env.verify(state.generated))
