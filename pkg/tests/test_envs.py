import itertools

import numpy as np
import pytest

from conftest import one_hot_policy
from sapolab.envs import (
    OPS,
    EnvSpec,
    Trajectory,
    enumerate_trajectories,
    exact_state_value,
    make_env,
    terminal_reward,
    uniform_policy,
)
from sapolab.exceptions import ConfigError, ContractError, ResourceError


def _traj(env, tokens):
    T = len(tokens)
    return Trajectory(env.prompt, tokens, np.zeros(T), np.zeros(T))


def test_tiny_tree_has_eight_responses_and_one_winner(tiny_env):
    pairs = enumerate_trajectories(tiny_env, uniform_policy(tiny_env))
    assert len(pairs) == 8
    assert all(p == 0.125 for _, p in pairs)
    assert sorted(t.tokens for t, _ in pairs) == list(itertools.product((0, 1), repeat=3))
    assert sum(t.reward for t, _ in pairs) == 1.0


def test_tiny_tree_target_scores_one(tiny_env):
    target = tiny_env.target
    assert terminal_reward(tiny_env, _traj(tiny_env, target)) == 1.0
    other = tuple(1 - x for x in target)
    assert terminal_reward(tiny_env, _traj(tiny_env, other)) == 0.0


def test_tiny_tree_target_depends_on_seed():
    spec = EnvSpec("tiny-tree", vocab_size=3, max_len=4)
    targets = {make_env(spec, s).target for s in range(10)}
    assert len(targets) > 1
    assert make_env(spec, 3).target == make_env(spec, 3).target


def test_chain_arith_prompt_encoding(chain_env):
    env = chain_env
    start, ops = env.prompt[0], env.prompt[1:]
    assert 0 <= start < 10 and len(ops) == 5
    assert all(10 <= o < 12 for o in ops)
    # hand trace of the documented encoding: op token 10 + j applies OPS[j]
    value, trace = start, []
    for o in ops:
        kind, operand = OPS[o - 10]
        value = (value + operand) % 10 if kind == "add" else (value * operand) % 10
        trace.append(value)
    assert env.intermediates == tuple(trace)
    assert env.answer == trace[-1]


def test_chain_arith_reward_depends_only_on_final_digit(chain_env):
    env = chain_env
    good = env.intermediates
    assert terminal_reward(env, _traj(env, good)) == 1.0
    wrong_steps = tuple((d + 1) % 10 for d in good[:-1]) + (env.answer,)
    assert terminal_reward(env, _traj(env, wrong_steps)) == 1.0
    bad = good[:-1] + ((env.answer + 1) % 10,)
    assert terminal_reward(env, _traj(env, bad)) == 0.0


def test_format_trap_requires_marker(trap_env):
    env = trap_env
    ans, marker, eos = env.answer, env.marker_token, env.eos_token
    assert terminal_reward(env, _traj(env, (1, 2, marker, ans, eos))) == 1.0
    assert terminal_reward(env, _traj(env, (1, 2, 3, 4, 5, ans))) == 0.0
    assert terminal_reward(env, _traj(env, (marker, ans, eos))) == 1.0
    assert terminal_reward(env, _traj(env, (1, 2, 3, 4, marker, ans))) == 1.0
    assert terminal_reward(env, _traj(env, (ans, eos))) == 0.0
    assert env.logit_bias[marker] < 0


def test_incomplete_trajectory_is_contract_error(tiny_env, chain_env):
    with pytest.raises(ContractError):
        terminal_reward(tiny_env, _traj(tiny_env, (0, 1)))
    with pytest.raises(ContractError):
        chain_env.verify((1, 2))


@pytest.mark.parametrize("kw", [
    dict(kind="tiny-tree", vocab_size=2, max_len=3, eos_token=2),
    dict(kind="tiny-tree", vocab_size=1, max_len=3),
    dict(kind="tiny-tree", vocab_size=2, max_len=0),
    dict(kind="bogus", vocab_size=2, max_len=3),
])
def test_invalid_spec_is_config_error(kw):
    with pytest.raises(ConfigError):
        make_env(EnvSpec(**kw), 0)


def test_spec_round_trip():
    spec = EnvSpec("format-trap", 14, 6, eos_token=13, task_params={"n_steps": 3, "modulus": 10})
    assert EnvSpec.from_dict(spec.to_dict()) == spec


def test_transitions_deterministic_and_terminal(chain_env):
    env = chain_env
    toks = (3, 1, 4, 1, 5)
    a, b = env.replay(toks), env.replay(toks)
    assert a == b and a.done
    with pytest.raises(ContractError):
        env.step(a, 0)


def test_verifier_is_pure(trap_env):
    t = _traj(trap_env, (trap_env.marker_token, trap_env.answer, trap_env.eos_token))
    assert terminal_reward(trap_env, t) == terminal_reward(trap_env, t)


def test_deterministic_policy_enumerates_one_trajectory(tiny_env):
    pe = one_hot_policy(2, lambda s: tiny_env.target[s.t])
    pairs = enumerate_trajectories(tiny_env, pe)
    assert len(pairs) == 1
    traj, p = pairs[0]
    assert p == 1.0 and traj.tokens == tiny_env.target and traj.reward == 1.0
    assert exact_state_value(tiny_env, pe, tiny_env.reset()) == 1.0


def test_probabilities_sum_to_one_on_chain_arith():
    env = make_env(EnvSpec("chain-arith", vocab_size=12, max_len=3, task_params={"n_steps": 2, "modulus": 10}), 1)
    rng = np.random.default_rng(0)
    table = {}

    def pe(s):
        if s.generated not in table:
            table[s.generated] = rng.dirichlet(np.ones(12))
        return table[s.generated]

    pairs = enumerate_trajectories(env, pe)
    assert len(pairs) == 12**3
    assert abs(sum(p for _, p in pairs) - 1.0) <= 1e-12
    direct = sum(p * t.reward for t, p in pairs)
    assert abs(exact_state_value(env, pe, env.reset()) - direct) <= 1e-12


def test_eos_prunes_enumeration(trap_env):
    pairs = enumerate_trajectories(make_env(EnvSpec("tiny-tree", 3, 3, eos_token=2), 0),
                                   uniform_policy(make_env(EnvSpec("tiny-tree", 3, 3, eos_token=2), 0)))
    assert abs(sum(p for _, p in pairs) - 1.0) <= 1e-12
    assert any(t.T < 3 for t, _ in pairs)


def test_exact_state_value_examples(tiny_env):
    pe = uniform_policy(tiny_env)
    assert exact_state_value(tiny_env, pe, tiny_env.reset(), 1.0) == 0.125
    tgt = tiny_env.target
    # one token before guaranteed failure: the wrong last token is forced
    wrong = one_hot_policy(2, lambda s: 1 - tgt[s.t])
    assert exact_state_value(tiny_env, wrong, tiny_env.replay(tgt[:2])) == 0.0
    assert exact_state_value(tiny_env, pe, tiny_env.replay(tgt[:2])) == 0.5
    assert exact_state_value(tiny_env, pe, tiny_env.replay(tgt)) == 0.0


def test_discounting_uses_remaining_steps(tiny_env):
    pe = uniform_policy(tiny_env)
    # reward sits on the third transition from the root: gamma^2 / 8
    assert abs(exact_state_value(tiny_env, pe, tiny_env.reset(), 0.5) - 0.25 / 8) <= 1e-15


def test_enumeration_cap():
    env = make_env(EnvSpec("chain-arith", vocab_size=12, max_len=6, task_params={"n_steps": 2, "modulus": 10}), 0)
    with pytest.raises(ResourceError):
        enumerate_trajectories(env, uniform_policy(env))


def test_trajectory_contract():
    with pytest.raises(ContractError):
        Trajectory((), (), [], [])
    with pytest.raises(ContractError):
        Trajectory((), (1, 2), [0.0], [0.0, 0.0])
