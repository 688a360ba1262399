"""Partition a response into contiguous segments.

Boundaries are 1-based *end* indices ``e_1 < ... < e_M = T``; segment ``m``
spans tokens ``b_m .. e_m`` with ``b_1 = 1`` and ``b_m = e_{m-1} + 1``.

``entropy-topk`` is the adaptive strategy. ``marker``, ``fixed-step`` and
``prob-accum`` are the ablation baselines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .envs import Trajectory
from .exceptions import ConfigError, ContractError

STRATEGIES = ("entropy-topk", "marker", "fixed-step", "prob-accum")


@dataclass(frozen=True)
class Segmentation:
    end_boundaries: tuple

    def __post_init__(self):
        object.__setattr__(self, "end_boundaries", tuple(int(e) for e in self.end_boundaries))

    @property
    def M(self) -> int:
        return len(self.end_boundaries)

    @property
    def T(self) -> int:
        return self.end_boundaries[-1]

    @property
    def starts(self) -> tuple:
        return (1,) + tuple(e + 1 for e in self.end_boundaries[:-1])

    @cached_property
    def lengths(self) -> np.ndarray:
        out = np.diff((0,) + self.end_boundaries)
        out.setflags(write=False)
        return out

    def segment_ids(self) -> np.ndarray:
        """0-based segment index of every token."""
        return self._segment_ids

    @cached_property
    def _segment_ids(self) -> np.ndarray:
        out = np.repeat(np.arange(self.M), self.lengths)
        out.setflags(write=False)
        return out

    def state_offsets(self) -> tuple:
        """Number of generated tokens at each segment-start state ``s_m``."""
        return (0,) + self.end_boundaries[:-1]

    def split(self, seq: Sequence) -> list:
        return [seq[b - 1 : e] for b, e in zip(self.starts, self.end_boundaries)]

    @classmethod
    def all_tokens(cls, T: int) -> "Segmentation":
        return cls(tuple(range(1, T + 1)))


def validate(seg: Segmentation, T: int) -> list[str]:
    """Every invariant violation of ``seg`` against a length-``T`` response."""
    e = list(seg.end_boundaries)
    problems = []
    if not e:
        return ["empty boundary list"]
    if e[0] < 1:
        problems.append(f"first boundary {e[0]} < 1")
    if any(b <= a for a, b in zip(e, e[1:])):
        problems.append("boundaries not strictly increasing")
    if e[-1] != T:
        problems.append(f"missing final boundary: last boundary {e[-1]} != T={T}")
    if any(x > T for x in e):
        problems.append(f"boundary beyond T={T}")
    return problems


@dataclass(frozen=True)
class SegStrategy:
    kind: str = "entropy-topk"
    k_percent: float | None = None
    marker_token: int | None = None
    step_len: int | None = None
    low_prob_threshold: float | None = None
    count_c: int | None = None
    boundary_mode: str = "end"

    _required = {
        "entropy-topk": ("k_percent",),
        "marker": ("marker_token",),
        "fixed-step": ("step_len",),
        "prob-accum": ("low_prob_threshold", "count_c"),
    }

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown segmentation strategy {self.kind!r}")
        for name in self._required[self.kind]:
            if getattr(self, name) is None:
                raise ConfigError(f"strategy {self.kind!r} requires {name}")
        if self.kind == "entropy-topk" and not 0 < self.k_percent <= 100:
            raise ConfigError(f"k_percent must lie in (0, 100], got {self.k_percent}")
        if self.kind == "fixed-step" and self.step_len < 1:
            raise ConfigError("step_len must be >= 1")
        if self.kind == "prob-accum" and (self.count_c < 1 or not 0 < self.low_prob_threshold <= 1):
            raise ConfigError("prob-accum needs count_c >= 1 and low_prob_threshold in (0, 1]")
        if self.boundary_mode not in ("end", "start"):
            raise ConfigError("boundary_mode must be 'end' or 'start'")

    def to_dict(self) -> dict:
        names = ("kind",) + self._required[self.kind] + ("boundary_mode",)
        return {n: getattr(self, n) for n in names}

    @classmethod
    def from_dict(cls, d) -> "SegStrategy":
        fields = {"kind", "k_percent", "marker_token", "step_len", "low_prob_threshold", "count_c", "boundary_mode"}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown SegStrategy fields: {sorted(unknown)}")
        return cls(**d)


def topk_count(k_percent: float, T: int) -> int:
    # round() guards against 0.3 * 10 = 3.0000000000000004 style overshoot
    return max(1, math.ceil(round(k_percent * T / 100.0, 9)))


def top_entropy_indices(entropies, k_percent: float) -> np.ndarray:
    """1-based indices of the top-k% entropies; ties go to the smaller index."""
    h = np.asarray(entropies, dtype=float)
    n = topk_count(k_percent, len(h))
    order = np.lexsort((np.arange(len(h)), -h))
    return np.sort(order[:n]) + 1


def segment(traj: Trajectory, strategy: SegStrategy) -> Segmentation:
    T = traj.T
    if T < 1:
        raise ContractError("cannot segment an empty response")
    kind = strategy.kind
    if kind == "entropy-topk":
        picks = top_entropy_indices(traj.entropies, strategy.k_percent)
        if strategy.boundary_mode == "start":
            # a selected token opens a new segment, so the previous one ends just before it
            picks = picks - 1
        cuts = [int(i) for i in picks if i >= 1]
    elif kind == "marker":
        cuts = [i + 1 for i, tok in enumerate(traj.tokens) if tok == strategy.marker_token]
    elif kind == "fixed-step":
        cuts = list(range(strategy.step_len, T + 1, strategy.step_len))
    else:
        cutoff = math.log(strategy.low_prob_threshold)
        cuts, count = [], 0
        for i, lp in enumerate(traj.old_logprobs, start=1):
            if lp < cutoff:
                count += 1
                if count == strategy.count_c:
                    cuts.append(i)
                    count = 0
    return Segmentation(tuple(sorted(set(cuts) | {T})))


class Segmenter(TransformerMixin, BaseEstimator):
    """Stateless transformer from trajectories to segmentations.

    Keeps the segmentation strategy composable with other estimator-style
    components; ``fit`` only validates parameters.
    """

    def __init__(self, kind="entropy-topk", k_percent=30.0, marker_token=None, step_len=None,
                 low_prob_threshold=None, count_c=None, boundary_mode="end"):
        self.kind = kind
        self.k_percent = k_percent
        self.marker_token = marker_token
        self.step_len = step_len
        self.low_prob_threshold = low_prob_threshold
        self.count_c = count_c
        self.boundary_mode = boundary_mode

    def _strategy(self) -> SegStrategy:
        keep = SegStrategy._required[self.kind] if self.kind in SegStrategy._required else ()
        kw = {n: getattr(self, n) for n in keep}
        return SegStrategy(kind=self.kind, boundary_mode=self.boundary_mode, **kw)

    def fit(self, X=None, y=None):
        self.strategy_ = self._strategy()
        return self

    def transform(self, X) -> list[Segmentation]:
        strategy = getattr(self, "strategy_", None) or self._strategy()
        return [segment(traj, strategy) for traj in X]
