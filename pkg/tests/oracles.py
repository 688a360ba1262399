"""Independent reference implementations used as test oracles.

Everything here is written directly from the defining formulas, in
``np.longdouble`` where finite differences need headroom below float64
rounding. Feature hashing is shared with the package; it is not what the
oracles check.
"""
import numpy as np

from sapolab.policy import feature_indices

LD = np.longdouble


def dense_features(fs, states):
    X = np.zeros((len(states), fs.n_features), dtype=LD)
    for r, s in enumerate(states):
        X[r, feature_indices(fs, s)] = 1
    return X


def token_states(batch):
    return [t.state_at(j) for t in batch.trajectories for j in range(t.T)]


def ld_logprobs(weights, vocab, X, tokens):
    W = np.asarray(weights, dtype=LD).reshape(vocab, X.shape[1])
    Z = X @ W.T
    m = Z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(Z - m).sum(axis=1))
    return Z[np.arange(len(tokens)), tokens] - lse


def ld_surrogate(batch, X, vocab, weights, eps, mode):
    """Clipped surrogate in extended precision; mode is sapo, ppo or naive-is."""
    x = ld_logprobs(weights, vocab, X, batch.tokens) - batch.old_logprobs.astype(LD)
    if mode == "sapo":
        n_seg = len(batch.seg_lengths)
        sums = np.zeros(n_seg, dtype=LD)
        np.add.at(sums, batch.seg_index, x)
        ratio = np.exp(sums / batch.seg_lengths.astype(LD))[batch.seg_index]
        adv = batch.seg_advantages[batch.seg_index].astype(LD)
    else:
        ratio = np.exp(x)
        src = batch.token_advantages if mode == "ppo" else batch.seg_advantages[batch.seg_index]
        adv = src.astype(LD)
    terms = np.minimum(ratio * adv, np.clip(ratio, LD(1) - LD(eps), LD(1) + LD(eps)) * adv)
    return (batch.token_weights.astype(LD) * terms).sum()


def gae_finite_sum(deltas, gamma, lam):
    """A_m = sum_l (gamma lam)^l delta_{m+l}, evaluated term by term."""
    M = len(deltas)
    return np.array([sum((gamma * lam) ** l * deltas[m + l] for l in range(M - m)) for m in range(M)])
