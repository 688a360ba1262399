"""Command-line entry point (``sapolab <subcommand>``).

Exit status: 0 success, 1 divergence (or bound violations for bias-check),
2 configuration or input error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import analysis
from ..config import RunConfig
from ..envs import enumerate_trajectories, exact_state_value, make_env, uniform_policy
from ..exceptions import ConfigError, ContractError, DivergenceError, ParseError, ResourceError
from ..optim import OBJECTIVES, ClipConfig, init_learner
from ..policy import policy_eval
from ..segmentation import segment
from ..synthetic import random_offpolicy_batch, random_value_problem
from ..value import value_loss_and_grad
from .io import TrajectoryRecord, dump_trajectories, line_chart_svg, load_trajectories, write_jsonl, write_table_csv
from .runner import compare_algorithms, run_experiment


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "algo", None):
        cfg = cfg.replace(algo=args.algo)
    if getattr(args, "out", None):
        cfg = cfg.replace(output_dir=args.out)
    if getattr(args, "k", None) is not None:
        if cfg.seg_strategy.kind != "entropy-topk":
            raise ConfigError("--k only applies to the entropy-topk strategy")
        cfg = cfg.replace(seg_strategy=replace(cfg.seg_strategy, k_percent=args.k))
    if getattr(args, "steps", None) is not None:
        cfg = cfg.replace(total_steps=args.steps)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, plots=args.plots)
    final = report.final_metrics
    print(f"wrote {report.metrics_path} ({len(report.metrics)} steps, config {report.config_hash[:12]})")
    if final is not None:
        print(f"final mean_reward={final.mean_reward:.4f} value_loss={final.value_loss:.6f}")
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    algos = [a for a in args.algos.split(",") if a]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    cmp = compare_algorithms(cfg, algos, seeds, args.out or cfg.output_dir, final_window=args.final_window)
    for row in cmp.rows():
        print(f"{row[0]:>10}  median final reward {row[2]:.4f}")
    print(f"wrote {cmp.table_path}")
    return 0


def cmd_segment(args) -> int:
    cfg = _config(args)
    records = load_trajectories(args.input)
    out = [TrajectoryRecord(r.id, r.trajectory, segment(r.trajectory, cfg.seg_strategy)) for r in records]
    dump_trajectories(out, args.output)
    mean_m = np.mean([r.segmentation.M for r in out]) if out else 0.0
    print(f"segmented {len(out)} trajectories (mean M {mean_m:.2f}) -> {args.output}")
    return 0


def _env_lift_runs(cfg: RunConfig, n_steps: int, q: float):
    """Per-step lift inputs under the frozen initial policy with oracle value gaps."""
    state = init_learner(cfg)
    env, pe = state.env, policy_eval(state.policy)
    from ..policy import sample_batch

    cache: dict = {}

    def value(s):
        if s.generated not in cache:
            cache[s.generated] = exact_state_value(env, pe, s, cfg.gae.gamma)
        return cache[s.generated]

    runs = []
    for step in range(n_steps):
        trajs = sample_batch(env, state.policy, [np.random.default_rng([cfg.seed, step, i])
                                                 for i in range(cfg.batch_size)])
        h, gaps = [], []
        for t in trajs:
            vals = [value(t.state_at(j)) for j in range(t.T + 1)]
            h.extend(t.entropies)
            gaps.extend(np.abs(np.diff(vals)))
        runs.append(analysis.LiftInputs(np.array(h), np.array(gaps), q))
    return runs


def cmd_lift(args) -> int:
    q_grid = [float(x) for x in args.q_grid.split(",")]
    if args.synthetic:
        coupling = 1.0 if args.synthetic == "coupled" else 0.0
        runs = analysis.synthetic_lift_runs(args.n_steps, args.n_tokens, coupling, seed=args.seed or 0)
    else:
        runs = _env_lift_runs(_config(args), args.n_steps, q_grid[-1])
    curve = analysis.lift_q_curve(runs, q_grid, n_stages=args.stages, smooth_window=args.window,
                                  seed=args.seed or 0)
    out = Path(args.out or "lift")
    out.mkdir(parents=True, exist_ok=True)
    write_table_csv(["stage", "q", "lift", "ci_lo", "ci_hi"], curve.rows, out / "lift_q.csv")
    line_chart_svg({f"stage {s}": (q_grid, curve.lifts(s)) for s in range(args.stages)}, out / "lift_q.svg",
                   title="lift vs q", xlabel="q", ylabel="lift")
    for row in curve.rows:
        print("stage {} q={:.2f} lift={:.3f} [{:.3f}, {:.3f}]".format(*row))
    print(f"spearman(smoothed lift, step) = {curve.spearman_rho:.3f}")
    return 0


def cmd_bias_check(args) -> int:
    worked = analysis.bias_bound_check([0.1, 0.1, 0.1])
    print(f"L=3, x=0.1: diff {worked.diff:.6f} <= bound {worked.bound:.6f}: {worked.holds}")
    n, violations = analysis.bias_bound_sweep(args.n_cases, args.max_len, args.max_abs, seed=args.seed or 0)
    out = Path(args.out or "bias_violations.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl([v.to_record() for v in violations], out)
    print(f"{n} cases, {len(violations)} violations -> {out}")
    return 1 if violations else 0


def cmd_grad_check(args) -> int:
    clip = ClipConfig()
    seed0 = args.seed or 0
    worst = {}
    for algo in ("sapo", "ppo", "naive-is"):
        errs = []
        for c in range(args.n_configs):
            case = random_offpolicy_batch(seed0 + c, k_percent=30.0)
            fn = OBJECTIVES[algo]
            ref = (lambda w: analysis.extended_surrogate(case.batch, w, case.new.vocab_size, clip.epsilon, algo)) \
                if args.extended else None
            errs.append(analysis.grad_check(lambda w: fn(case.batch, case.new.with_weights(w), clip)[:2],
                                            case.new.weights, h=args.h, seed=c, reference=ref))
        worst[algo] = max(errs)
    errs = []
    for c in range(args.n_configs):
        vp, states, rets = random_value_problem(seed0 + c)
        errs.append(analysis.grad_check(lambda w: value_loss_and_grad(vp.with_weights(w), states, rets),
                                        vp.weights, h=args.h, seed=c))
    worst["value"] = max(errs)
    for k, v in worst.items():
        print(f"{k:>9}: max relative error {v:.3e}")
    return 0 if max(worst.values()) <= args.tol else 1


def cmd_enumerate(args) -> int:
    cfg = _config(args)
    env = make_env(cfg.env, cfg.env_seed)
    pe = uniform_policy(env) if args.policy == "uniform" else policy_eval(init_learner(cfg).policy)
    pairs = enumerate_trajectories(env, pe)
    out = Path(args.out or "enumeration.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(({"tokens": list(t.tokens), "prob": p, "reward": t.reward} for t, p in pairs), out)
    v = exact_state_value(env, pe, env.reset(), cfg.gae.gamma)
    print(f"{len(pairs)} trajectories, V(root) = {v:.6f} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sapolab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, algo=True):
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--seed", type=int, help="override the training seed")
        if algo:
            sp.add_argument("--algo", choices=sorted(OBJECTIVES), help="override the algorithm")
        sp.add_argument("--out", help="output directory or file")
        sp.add_argument("--k", type=float, help="entropy top-k percent")

    sp = sub.add_parser("train", help="train one run")
    common(sp)
    sp.add_argument("--steps", type=int, help="override total_steps")
    sp.add_argument("--plots", action="store_true", help="write per-metric SVG charts")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("compare", help="compare algorithms over seeds")
    common(sp, algo=False)
    sp.add_argument("--algos", default="sapo,grpo,naive-is,ppo")
    sp.add_argument("--seeds", default="0,1,2,3,4")
    sp.add_argument("--steps", type=int, help="override total_steps")
    sp.add_argument("--final-window", type=int, default=20)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("segment", help="re-segment a trajectory JSONL dump")
    common(sp, algo=False)
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("lift", help="lift-q curves with bootstrap intervals")
    common(sp, algo=False)
    sp.add_argument("--synthetic", choices=("coupled", "independent"))
    sp.add_argument("--q-grid", default="0.1,0.3,0.5,0.7,0.9")
    sp.add_argument("--n-steps", type=int, default=30)
    sp.add_argument("--n-tokens", type=int, default=2000)
    sp.add_argument("--stages", type=int, default=3)
    sp.add_argument("--window", type=int, default=5)
    sp.set_defaults(func=cmd_lift)

    sp = sub.add_parser("bias-check", help="sweep the geometric-ratio bias bound")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--n-cases", type=int, default=100_000)
    sp.add_argument("--max-len", type=int, default=64)
    sp.add_argument("--max-abs", type=float, default=0.5)
    sp.set_defaults(func=cmd_bias_check)

    sp = sub.add_parser("grad-check", help="finite-difference checks of all gradients")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-configs", type=int, default=10)
    sp.add_argument("--h", type=float, default=1e-6)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--float64", dest="extended", action="store_false",
                    help="difference the surrogates in float64 instead of long double")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("enumerate", help="dump every trajectory with its probability")
    common(sp, algo=False)
    sp.add_argument("--policy", choices=("uniform", "init"), default="uniform")
    sp.set_defaults(func=cmd_enumerate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ParseError, ContractError, ResourceError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
