"""Advantage and return estimation at segment, token and group granularity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ContractError
from .segmentation import Segmentation


@dataclass(frozen=True)
class GaeParams:
    gamma: float = 1.0
    lam: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"gamma and lambda must lie in [0, 1], got {self.gamma}, {self.lam}")


@dataclass(frozen=True, eq=False)
class SegmentCredit:
    rewards: np.ndarray
    deltas: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    token_advantages: np.ndarray

    @property
    def M(self) -> int:
        return len(self.rewards)

    def to_record(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in ("rewards", "deltas", "advantages", "returns")}


def segment_deltas(rewards, boundary_values, gamma: float) -> np.ndarray:
    """TD errors ``r_m + gamma V(s_{m+1}) - V(s_m)``.

    ``boundary_values`` holds ``M + 1`` entries; the last is the terminal
    value and is normally 0.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(boundary_values, dtype=float)
    if r.ndim != 1 or v.shape != (len(r) + 1,):
        raise ContractError(f"need M rewards and M+1 values, got {r.shape} and {v.shape}")
    return r + gamma * v[1:] - v[:-1]


def segment_gae(deltas, gae: GaeParams, boundary_values=None):
    """Backward-recursive GAE over segments.

    Returns the advantages, and also the returns ``A_m + V(s_m)`` when
    ``boundary_values`` (``M`` or ``M + 1`` entries) is supplied.
    """
    d = np.asarray(deltas, dtype=float)
    if d.ndim != 1 or len(d) == 0:
        raise ContractError("need at least one TD error")
    decay = gae.gamma * gae.lam
    adv = np.empty_like(d)
    acc = 0.0
    for m in range(len(d) - 1, -1, -1):
        acc = d[m] + decay * acc
        adv[m] = acc
    if boundary_values is None:
        return adv
    v = np.asarray(boundary_values, dtype=float)[: len(d)]
    return adv, adv + v


def broadcast_to_tokens(advantages, seg: Segmentation) -> np.ndarray:
    a = np.asarray(advantages, dtype=float)
    if a.shape != (seg.M,):
        raise ContractError(f"expected {seg.M} segment advantages, got {a.shape}")
    return np.repeat(a, seg.lengths)


def token_gae(rewards, token_values, gae: GaeParams) -> np.ndarray:
    """Token-level GAE; ``token_values`` has ``T + 1`` entries ending with the terminal value."""
    d = segment_deltas(rewards, token_values, gae.gamma)
    return segment_gae(d, gae)


def sparse_segment_rewards(terminal_reward: float, M: int) -> np.ndarray:
    r = np.zeros(M)
    r[-1] = terminal_reward
    return r


def compute_segment_credit(rewards, boundary_values, seg: Segmentation, gae: GaeParams) -> SegmentCredit:
    """Full credit pipeline for one response; ``boundary_values`` has ``M`` entries."""
    v = np.append(np.asarray(boundary_values, dtype=float), 0.0)
    deltas = segment_deltas(rewards, v, gae.gamma)
    adv, ret = segment_gae(deltas, gae, v)
    return SegmentCredit(np.asarray(rewards, dtype=float), deltas, adv, ret, broadcast_to_tokens(adv, seg))


def group_relative_advantages(group_rewards, normalize_std: bool = True) -> np.ndarray:
    """Reward minus group mean, optionally divided by (population std + 1e-8)."""
    r = np.asarray(group_rewards, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise ContractError("a group needs at least two rewards")
    a = r - r.mean()
    if normalize_std:
        a = a / (r.std() + 1e-8)
    return a
