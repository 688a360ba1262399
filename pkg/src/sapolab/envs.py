"""Deterministic token MDPs with verifiable terminal rewards.

Three task families are provided:

``chain-arith``
    The prompt is ``[start digit, op_1, ..., op_n]``. The intended response is
    the ``n`` running results of applying each op modulo ``modulus``. Only the
    last emitted digit is verified, so reward is outcome-only.
``format-trap``
    Same prompt encoding; the response must *end* with ``[marker, answer]``.
    The initial policy is biased against the marker token.
``tiny-tree``
    No prompt; a single rewarded leaf of the ``vocab_size ** max_len`` tree,
    drawn from the seed. Exists to make enumeration oracles exact.

The brute-force helpers at the bottom (:func:`enumerate_trajectories`,
:func:`exact_state_value`) are the ground truth used by the test-suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, ContractError, ResourceError

KINDS = ("chain-arith", "format-trap", "tiny-tree")

# (operation, operand) applied modulo the env's modulus; op token j uses OPS[j % len(OPS)]
OPS = (("add", 1), ("add", 3), ("mul", 3), ("add", 7), ("mul", 7), ("add", 9), ("mul", 9))

ENUMERATION_CAP = 10**6


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    vocab_size: int
    max_len: int
    task_params: Mapping[str, int] = field(default_factory=dict)
    eos_token: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown env kind {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.vocab_size, (int, np.integer)) or self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be an integer >= 2, got {self.vocab_size!r}")
        if not isinstance(self.max_len, (int, np.integer)) or self.max_len < 1:
            raise ConfigError(f"max_len must be an integer >= 1, got {self.max_len!r}")
        if self.eos_token is not None and not 0 <= self.eos_token < self.vocab_size:
            raise ConfigError(f"eos_token {self.eos_token} outside vocabulary of size {self.vocab_size}")
        object.__setattr__(self, "task_params", dict(self.task_params))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "vocab_size": int(self.vocab_size),
            "max_len": int(self.max_len),
            "eos_token": None if self.eos_token is None else int(self.eos_token),
            "task_params": {k: int(v) for k, v in sorted(self.task_params.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnvSpec":
        unknown = set(d) - {"kind", "vocab_size", "max_len", "eos_token", "task_params"}
        if unknown:
            raise ConfigError(f"unknown EnvSpec fields: {sorted(unknown)}")
        try:
            return cls(
                kind=d["kind"],
                vocab_size=d["vocab_size"],
                max_len=d["max_len"],
                task_params=d.get("task_params", {}),
                eos_token=d.get("eos_token"),
            )
        except KeyError as exc:
            raise ConfigError(f"EnvSpec missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class EpisodeState:
    prompt: tuple
    generated: tuple = ()
    done: bool = False

    @property
    def t(self) -> int:
        """Number of response tokens generated so far."""
        return len(self.generated)

    @property
    def context(self) -> tuple:
        return self.prompt + self.generated


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One sampled episode; log-probs and entropies are per response token."""

    prompt: tuple
    tokens: tuple
    old_logprobs: np.ndarray
    entropies: np.ndarray
    reward: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(x) for x in self.prompt))
        object.__setattr__(self, "tokens", tuple(int(x) for x in self.tokens))
        lp = np.asarray(self.old_logprobs, dtype=float)
        ent = np.asarray(self.entropies, dtype=float)
        T = len(self.tokens)
        if T < 1:
            raise ContractError("trajectory must contain at least one token")
        if lp.shape != (T,) or ent.shape != (T,):
            raise ContractError(
                f"old_logprobs/entropies must have length {T}, got {lp.shape} and {ent.shape}"
            )
        object.__setattr__(self, "old_logprobs", lp)
        object.__setattr__(self, "entropies", ent)
        object.__setattr__(self, "reward", float(self.reward))

    @property
    def T(self) -> int:
        return len(self.tokens)

    def state_at(self, t: int) -> EpisodeState:
        """State before emitting response token ``t`` (0-based); ``t == T`` is terminal."""
        return EpisodeState(self.prompt, self.tokens[:t], done=(t == self.T))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.prompt == other.prompt
            and self.tokens == other.tokens
            and np.array_equal(self.old_logprobs, other.old_logprobs)
            and np.array_equal(self.entropies, other.entropies)
            and self.reward == other.reward
        )

    __hash__ = None


def _apply_op(op_index: int, value: int, modulus: int) -> int:
    kind, operand = OPS[op_index % len(OPS)]
    return (value + operand) % modulus if kind == "add" else (value * operand) % modulus


class Env:
    """Immutable token MDP built by :func:`make_env`.

    Attributes
    ----------
    prompt : tuple of int
        The single prompt of this environment, a pure function of (spec, seed).
    answer : int or None
        Final chained digit (chain-arith, format-trap).
    intermediates : tuple of int
        Running results of the chain (chain-arith, format-trap).
    target : tuple of int or None
        The rewarded leaf (tiny-tree).
    marker_token : int or None
        Answer marker (format-trap).
    logit_bias : ndarray of shape (vocab_size,)
        Additive bias the initial policy should carry; nonzero only for format-trap.
    """

    def __init__(self, spec: EnvSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self.vocab_size = int(spec.vocab_size)
        self.max_len = int(spec.max_len)
        self.eos_token = spec.eos_token
        self.answer = None
        self.intermediates = ()
        self.target = None
        self.marker_token = None
        self.logit_bias = np.zeros(self.vocab_size)
        rng = np.random.default_rng(self.seed)
        p = spec.task_params

        if spec.kind == "tiny-tree":
            if self.vocab_size**self.max_len > ENUMERATION_CAP:
                raise ConfigError("tiny-tree must satisfy vocab_size ** max_len <= 1e6")
            self.prompt = ()
            self.target = tuple(int(x) for x in rng.integers(0, self.vocab_size, size=self.max_len))
            return

        n_steps = int(p.get("n_steps", 5))
        modulus = int(p.get("modulus", 10))
        n_special = (1 if spec.kind == "format-trap" else 0) + (0 if spec.eos_token is None else 1)
        n_op_kinds = int(p.get("n_op_kinds", self.vocab_size - modulus - n_special))
        if n_steps < 1 or modulus < 2:
            raise ConfigError("n_steps must be >= 1 and modulus >= 2")
        if n_op_kinds < 1 or modulus + n_op_kinds + n_special > self.vocab_size:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for modulus {modulus}, "
                f"{n_op_kinds} op kinds and {n_special} special tokens"
            )
        op_ids = list(range(modulus, modulus + n_op_kinds))
        if spec.eos_token is not None and (spec.eos_token < modulus or spec.eos_token in op_ids):
            raise ConfigError("eos_token must not collide with digit or op-code tokens")
        self.modulus = modulus
        self.n_steps = n_steps
        self.n_op_kinds = n_op_kinds

        start = int(rng.integers(0, modulus))
        ops = [int(o) for o in rng.integers(0, n_op_kinds, size=n_steps)]
        self.prompt = (start,) + tuple(modulus + o for o in ops)
        value, results = start, []
        for o in ops:
            value = _apply_op(o, value, modulus)
            results.append(value)
        self.intermediates = tuple(results)
        self.answer = results[-1]

        if spec.kind == "format-trap":
            marker = int(p.get("marker_token", modulus + n_op_kinds))
            if not 0 <= marker < self.vocab_size or marker < modulus or marker in op_ids or marker == spec.eos_token:
                raise ConfigError(f"invalid marker_token {marker}")
            if self.max_len < 2:
                raise ConfigError("format-trap needs max_len >= 2")
            self.marker_token = marker
            self.logit_bias[marker] = -float(p.get("marker_bias", 2))

    def __repr__(self):
        return f"Env(kind={self.spec.kind!r}, seed={self.seed}, prompt={self.prompt})"

    # transitions

    def reset(self) -> EpisodeState:
        return EpisodeState(self.prompt, (), False)

    def step(self, state: EpisodeState, token: int) -> EpisodeState:
        if state.done:
            raise ContractError("episode already terminated")
        if not 0 <= token < self.vocab_size:
            raise ContractError(f"token {token} outside vocabulary")
        generated = state.generated + (int(token),)
        done = len(generated) >= self.max_len or (self.eos_token is not None and token == self.eos_token)
        return EpisodeState(state.prompt, generated, done)

    def replay(self, tokens: Sequence[int]) -> EpisodeState:
        state = self.reset()
        for tok in tokens:
            state = self.step(state, tok)
        return state

    def is_complete(self, tokens: Sequence[int]) -> bool:
        if not tokens:
            return False
        if len(tokens) > self.max_len:
            return False
        body = tokens[:-1]
        if self.eos_token is not None and self.eos_token in body:
            return False
        return len(tokens) == self.max_len or (self.eos_token is not None and tokens[-1] == self.eos_token)

    # verifier

    def verify(self, tokens: Sequence[int]) -> float:
        """Reward of a complete response; 1.0 iff the verifier accepts it."""
        tokens = tuple(int(t) for t in tokens)
        if not self.is_complete(tokens):
            raise ContractError(f"response {tokens} is not a complete episode")
        body = tokens[:-1] if self.eos_token is not None and tokens[-1] == self.eos_token else tokens
        kind = self.spec.kind
        if kind == "tiny-tree":
            return 1.0 if tokens == self.target else 0.0
        if kind == "chain-arith":
            return 1.0 if body and body[-1] == self.answer else 0.0
        return 1.0 if len(body) >= 2 and body[-2] == self.marker_token and body[-1] == self.answer else 0.0

    def terminal_reward(self, traj: Trajectory) -> float:
        if tuple(traj.prompt) != self.prompt:
            raise ContractError("trajectory prompt does not belong to this environment")
        return self.verify(traj.tokens)


def make_env(spec: EnvSpec, seed: int = 0) -> Env:
    if not isinstance(spec, EnvSpec):
        spec = EnvSpec.from_dict(spec)
    return Env(spec, seed)


def terminal_reward(env: Env, traj: Trajectory) -> float:
    return env.terminal_reward(traj)


def _check_cap(env: Env, max_len: int):
    if env.vocab_size**max_len > ENUMERATION_CAP:
        raise ResourceError(
            f"enumeration of {env.vocab_size}**{max_len} sequences exceeds cap {ENUMERATION_CAP}"
        )


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _completions(env, policy_eval, state, max_len):
    """Yield (tokens, prob, logprobs, entropies) for every completion of ``state``."""
    stack = [(state, 1.0, (), ())]
    while stack:
        s, prob, lps, ents = stack.pop()
        if s.done or s.t >= max_len:
            yield s.generated, prob, lps, ents
            continue
        p = np.asarray(policy_eval(s), dtype=float)
        h = _entropy(p)
        # reversed push keeps yield order lexicographic
        for tok in np.flatnonzero(p > 0)[::-1]:
            stack.append((env.step(s, int(tok)), prob * p[tok], lps + (math.log(p[tok]),), ents + (h,)))


def enumerate_trajectories(
    env: Env,
    policy_eval: Callable[[EpisodeState], np.ndarray],
    max_len: int | None = None,
) -> list[tuple[Trajectory, float]]:
    """Every reachable complete trajectory with its exact probability.

    ``policy_eval`` maps a state to a probability vector over the vocabulary;
    zero-probability branches are pruned. Responses cut off by a ``max_len``
    shorter than the horizon are returned with reward 0.
    """
    max_len = env.max_len if max_len is None else int(max_len)
    if not 1 <= max_len <= env.max_len:
        raise ContractError("max_len must lie in [1, env.max_len]")
    _check_cap(env, max_len)
    out = []
    for tokens, prob, lps, ents in _completions(env, policy_eval, env.reset(), max_len):
        reward = env.verify(tokens) if env.is_complete(tokens) else 0.0
        out.append((Trajectory(env.prompt, tokens, lps, ents, reward), prob))
    return out


def exact_state_value(
    env: Env,
    policy_eval: Callable[[EpisodeState], np.ndarray],
    state: EpisodeState,
    gamma: float = 1.0,
) -> float:
    """Expected discounted terminal reward from ``state``; terminal states are worth 0."""
    if state.done:
        return 0.0
    _check_cap(env, env.max_len - state.t)
    total = 0.0
    for tokens, prob, _, _ in _completions(env, policy_eval, state, env.max_len):
        if prob == 0.0:
            continue
        total += prob * gamma ** (len(tokens) - state.t - 1) * env.verify(tokens)
    return total


def uniform_policy(env: Env) -> Callable[[EpisodeState], np.ndarray]:
    p = np.full(env.vocab_size, 1.0 / env.vocab_size)
    return lambda state: p
