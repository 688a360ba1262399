"""Statistics for checking the analytical claims behind segment-aligned updates.

* :func:`lift` / :func:`lift_q_curve` -- enrichment of large value jumps among
  high-entropy tokens, with bootstrap intervals and a Spearman trend.
* :func:`bias_bound_check` -- raw vs geometric-mean segment ratio and the
  ``e^{L|mu|} (L-1) |mu|`` bound on their gap.
* :func:`target_variance_reduction` -- variance of segment-averaged targets.
* :func:`grad_check` -- central finite differences against an analytic gradient,
  optionally differenced in extended precision (:func:`extended_surrogate`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .envs import Env, Trajectory, exact_state_value
from .exceptions import ContractError, UndefinedStatisticError
from .segmentation import Segmentation

QUANTILE_METHOD = "inverted_cdf"


@dataclass(frozen=True, eq=False)
class LiftInputs:
    entropies: np.ndarray
    value_gaps: np.ndarray
    q: float = 0.9
    d_quantile: float = 0.8

    def __post_init__(self):
        h = np.asarray(self.entropies, dtype=float)
        g = np.asarray(self.value_gaps, dtype=float)
        if h.ndim != 1 or h.shape != g.shape or len(h) < 10:
            raise ContractError("entropies and value_gaps must be equally long with at least 10 entries")
        if np.any(g < 0):
            raise ContractError("value gaps must be non-negative")
        if not 0 < self.q < 1 or not 0 < self.d_quantile < 1:
            raise ContractError("quantiles must lie in (0, 1)")
        object.__setattr__(self, "entropies", h)
        object.__setattr__(self, "value_gaps", g)


def lift(inputs: LiftInputs) -> float:
    """``P(D | A) / P(D)`` with A the top-q entropy tokens and D the large value jumps.

    Both thresholds are order statistics (inverted-CDF quantiles), so the
    result depends only on ranks.
    """
    h, g = inputs.entropies, inputs.value_gaps
    in_a = h >= np.quantile(h, inputs.q, method=QUANTILE_METHOD)
    in_d = g >= np.quantile(g, inputs.d_quantile, method=QUANTILE_METHOD)
    if not in_a.any() or not in_d.any():
        raise UndefinedStatisticError("lift undefined: empty high-entropy or branching set")
    return float(np.mean(in_d[in_a]) / np.mean(in_d))


def bootstrap_ci(values, statistic: Callable, n_boot: int = 1000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap interval, resampling whole items of ``values``."""
    n = len(values)
    if n < 2:
        raise ContractError("bootstrap needs at least two samples")
    if n_boot < 100:
        raise ContractError("n_boot must be >= 100")
    if not 0 < level < 1:
        raise ContractError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    arr = values if isinstance(values, np.ndarray) else None
    reps = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        reps[b] = statistic(arr[idx] if arr is not None else [values[i] for i in idx])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def spearman(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ContractError("spearman needs two equally long sequences of length >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedStatisticError("spearman correlation undefined for constant input")
    return float(stats.spearmanr(x, y).statistic)


@dataclass(frozen=True, eq=False)
class BiasCase:
    token_logratios: np.ndarray
    L: int
    mu: float
    raw_ratio: float
    geo_ratio: float
    diff: float
    bound: float
    holds: bool

    def to_record(self) -> dict:
        return {"x": [float(v) for v in self.token_logratios], "L": self.L, "mu": self.mu,
                "raw_ratio": self.raw_ratio, "geo_ratio": self.geo_ratio,
                "diff": self.diff, "bound": self.bound, "holds": self.holds}


def bias_bound_check(x) -> BiasCase:
    """Gap between ``e^{L mu}`` and ``e^{mu}`` against ``e^{L|mu|} (L-1) |mu|``."""
    x = np.asarray(x, dtype=float)
    L = len(x)
    if L < 1:
        raise ContractError("need at least one token log-ratio")
    mu = float(np.mean(x))
    raw = math.exp(L * mu)
    geo = math.exp(mu)
    # e^{L mu} - e^{mu} = e^{mu} expm1((L-1) mu), free of cancellation for small mu
    diff = abs(geo * math.expm1((L - 1) * mu))
    bound = math.exp(L * abs(mu)) * (L - 1) * abs(mu)
    return BiasCase(x, L, mu, raw, geo, diff, bound, diff <= bound)


def bias_bound_sweep(n_cases: int = 100_000, max_len: int = 64, max_abs: float = 0.5, seed: int = 0):
    """Random cases with ``L <= max_len`` and ``|x_t| <= max_abs``; returns (n_checked, violations)."""
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, max_len + 1, size=n_cases)
    violations = []
    for L in lengths:
        case = bias_bound_check(rng.uniform(-max_abs, max_abs, size=L))
        if not case.holds:
            violations.append(case)
    return n_cases, violations


def target_variance_reduction(token_targets, seg: Segmentation):
    """(measured, predicted) ratio of segment-mean target variance to token target variance."""
    y = np.asarray(token_targets, dtype=float)
    if len(y) < 2 or seg.T != len(y):
        raise ContractError("need T >= 2 targets covered by the segmentation")
    var_tok = np.var(y)
    if var_tok == 0:
        raise UndefinedStatisticError("token targets have zero variance")
    seg_means = np.bincount(seg.segment_ids(), weights=y) / seg.lengths
    measured = float(np.var(seg_means) / var_tok)
    predicted = float(np.mean(1.0 / seg.lengths))
    return measured, predicted


def grad_check(objective: Callable, params, h: float = 1e-6, n_coords: int = 64, seed: int = 0,
               reference: Callable | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``objective(x) -> (value, grad)`` on a flat vector. At least ``n_coords``
    coordinates are checked (all of them for small problems); coordinates
    where the analytic gradient is non-zero are sampled first so sparse
    gradients are not checked only where both sides are trivially zero.

    ``reference(x) -> value`` optionally replaces ``objective`` for the
    difference quotient. Passing a higher-precision evaluation (e.g.
    ``np.longdouble``) keeps float64 cancellation in ``f(x+h) - f(x-h)`` from
    swamping coordinates whose gradient is tiny.
    """
    value_fn = reference or (lambda x: objective(x)[0])
    if h <= 0:
        raise ContractError("step h must be positive")
    x0 = np.asarray(params, dtype=float).copy()
    f0, g = objective(x0)
    g = np.asarray(g, dtype=float)
    if not np.isfinite(f0) or not np.all(np.isfinite(g)):
        raise ContractError("objective or gradient is not finite at the check point")
    rng = np.random.default_rng(seed)
    d = x0.size
    if d <= n_coords:
        coords = np.arange(d)
    else:
        support = np.flatnonzero(g)
        rest = np.setdiff1d(np.arange(d), support)
        n_sup = min(len(support), n_coords - n_coords // 4)
        coords = np.concatenate([
            rng.choice(support, n_sup, replace=False),
            rng.choice(rest, min(len(rest), n_coords - n_sup), replace=False),
        ])
    worst = 0.0
    for j in coords:
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        fp, fm = value_fn(xp), value_fn(xm)
        if not np.isfinite(fp) or not np.isfinite(fm):
            raise ContractError("objective became non-finite during differencing")
        # divide by the step actually taken after rounding x +- h
        num = float((fp - fm) / (type(fp)(xp[j]) - type(fp)(xm[j])))
        denom = max(abs(g[j]), abs(num), 1e-8)
        worst = max(worst, abs(g[j] - num) / denom)
    return worst


def extended_surrogate(batch, weights, vocab_size: int, epsilon: float, algo: str):
    """Clipped surrogate of ``batch`` at flat policy ``weights`` in ``np.longdouble``.

    Meant as the ``reference`` of :func:`grad_check`: the extra precision keeps
    ``f(x+h) - f(x-h)`` meaningful on coordinates with tiny gradients.
    """
    LD = np.longdouble
    phi = batch.phi.tocsr()
    W = np.asarray(weights, dtype=LD).reshape(vocab_size, -1)
    z = np.empty((phi.shape[0], vocab_size), dtype=LD)
    for r in range(phi.shape[0]):
        a, b = phi.indptr[r], phi.indptr[r + 1]
        z[r] = W[:, phi.indices[a:b]] @ phi.data[a:b].astype(LD)
    m = z.max(axis=1, keepdims=True)
    logp = z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))
    x = logp[np.arange(len(batch.tokens)), batch.tokens] - batch.old_logprobs.astype(LD)
    if algo == "sapo":
        mu = np.zeros(len(batch.seg_lengths), dtype=LD)
        np.add.at(mu, batch.seg_index, x)
        ratio = np.exp(mu / batch.seg_lengths.astype(LD))[batch.seg_index]
        adv = batch.seg_advantages[batch.seg_index]
    elif algo in ("ppo", "grpo", "naive-is"):
        ratio = np.exp(x)
        adv = batch.token_advantages if algo != "naive-is" else batch.seg_advantages[batch.seg_index]
    else:
        raise ContractError(f"unknown objective {algo!r}")
    adv = np.asarray(adv, dtype=LD)
    terms = np.minimum(ratio * adv, np.clip(ratio, LD(1) - LD(epsilon), LD(1) + LD(epsilon)) * adv)
    return (batch.token_weights.astype(LD) * terms).sum()


# value discontinuities and the lift-q pipeline


def value_gaps_exact(env: Env, policy_eval, traj: Trajectory, gamma: float = 1.0) -> np.ndarray:
    """``|V(s_t) - V(s_{t+1})|`` for every response token, from the enumeration oracle."""
    values = [exact_state_value(env, policy_eval, traj.state_at(t), gamma) for t in range(traj.T + 1)]
    return np.abs(np.diff(values))


@dataclass(frozen=True)
class LiftCurve:
    rows: list
    step_lift: np.ndarray
    smoothed: np.ndarray
    spearman_rho: float

    def lifts(self, stage: int) -> np.ndarray:
        return np.array([r[2] for r in self.rows if r[0] == stage])


def lift_q_curve(
    runs: Sequence[LiftInputs],
    q_grid: Sequence[float],
    n_stages: int = 3,
    n_boot: int = 1000,
    level: float = 0.95,
    smooth_window: int = 5,
    seed: int = 0,
) -> LiftCurve:
    """Stage-averaged lift for every q, with bootstrap intervals over steps.

    ``runs`` is ordered by training step. Steps are cut into ``n_stages``
    contiguous stages; each stage's lift at ``q`` is the mean per-step lift and
    its interval resamples steps. The trend statistic is the Spearman
    correlation between step index and the rolling mean (``smooth_window``)
    of the per-step lift averaged over ``q_grid``.
    """
    if n_stages < 2 or len(runs) < n_stages:
        raise ContractError("need at least two stages with one step each")
    q_grid = [float(q) for q in q_grid]
    per_step = np.array([[lift(replace(r, q=q)) for q in q_grid] for r in runs])
    rows = []
    for stage, idx in enumerate(np.array_split(np.arange(len(runs)), n_stages)):
        for j, q in enumerate(q_grid):
            vals = per_step[idx, j]
            lo, hi = bootstrap_ci(vals, np.mean, n_boot, level, seed=seed + 7919 * stage + j)
            rows.append((stage, q, float(vals.mean()), lo, hi))
    step_lift = per_step.mean(axis=1)
    w = max(1, min(smooth_window, len(step_lift)))
    smoothed = np.convolve(step_lift, np.ones(w) / w, mode="valid")
    rho = spearman(np.arange(len(smoothed)), smoothed)
    return LiftCurve(rows, step_lift, smoothed, rho)


def synthetic_lift_runs(n_steps: int, n_tokens: int, coupling: float, seed: int = 0,
                        q: float = 0.9, d_quantile: float = 0.8, noise: float = 1.0) -> list[LiftInputs]:
    """Per-step synthetic data with ``dV = |coupling * H + noise|``; coupling 0 gives independence."""
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(n_steps):
        h = rng.exponential(1.0, size=n_tokens)
        gaps = np.abs(coupling * h + noise * rng.standard_normal(n_tokens))
        runs.append(LiftInputs(h, gaps, q, d_quantile))
    return runs
