"""Run orchestration: training loops, artifacts and multi-algorithm comparisons."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..checkpoint import save_params
from ..config import RunConfig
from ..exceptions import ContractError, DivergenceError
from ..optim import METRIC_FIELDS, LearnerState, StepMetrics, collect, init_learner, train_step
from .io import _fmt, dump_trajectories, line_chart_svg, metrics_csv_text, read_metrics_csv, write_table_csv

CURVE_METRICS = ("mean_reward", "value_loss", "mean_entropy", "mean_resp_len")


@dataclass
class RunReport:
    metrics_path: Path
    config_snapshot: str
    config_hash: str
    final_metrics: StepMetrics | None
    wall_time: float
    metrics: list = field(default_factory=list, repr=False)
    state: LearnerState | None = field(default=None, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.metrics], dtype=float)


def _manifest(config: RunConfig, step: int, status: str, artifacts: dict) -> str:
    return json.dumps({
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "step": step,
        "status": status,
        "artifacts": artifacts,
    }, indent=2, sort_keys=True) + "\n"


def save_checkpoint(state: LearnerState, config: RunConfig, directory) -> Path:
    """Both parameter files plus a manifest naming step, seed and config hash."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_params(state.policy, d / "policy.ckpt")
    save_params(state.value, d / "value.ckpt")
    path = d / "manifest.json"
    path.write_text(_manifest(config, state.step, "checkpoint",
                              {"policy": "policy.ckpt", "value": "value.ckpt"}))
    return path


def plot_metrics(metrics_path, out_dir) -> list[Path]:
    data = read_metrics_csv(metrics_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in METRIC_FIELDS[1:]:
        p = out / f"{name}.svg"
        line_chart_svg({name: (data["step"], data[name])}, p, title=name, ylabel=name)
        paths.append(p)
    return paths


def run_experiment(config: RunConfig, plots: bool = False,
                   on_step: Callable[[StepMetrics], None] | None = None) -> RunReport:
    """Train for ``config.total_steps`` steps and write the run directory.

    Layout of ``config.output_dir``: ``config.json``, ``metrics.csv``,
    ``manifest.json``, ``checkpoint/``, ``trajectories/step_XXXXXX.jsonl`` at
    every ``dump_interval`` steps, ``plots/*.svg`` on request, and
    ``divergence.json`` if training blew up (the error is re-raised).
    """
    start = time.perf_counter()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = config.to_json()
    (out / "config.json").write_text(snapshot)
    metrics_path = out / "metrics.csv"
    artifacts = {"config": "config.json", "metrics": "metrics.csv"}

    state = init_learner(config)
    history: list[StepMetrics] = []
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(metrics_csv_text([]))
        try:
            for _ in range(config.total_steps):
                if config.dump_interval and state.step % config.dump_interval == 0:
                    tdir = out / "trajectories"
                    tdir.mkdir(exist_ok=True)
                    dump_trajectories(collect(state, config)[0], tdir / f"step_{state.step:06d}.jsonl")
                state, m = train_step(state, config)
                history.append(m)
                fh.write(",".join(_fmt(v) for v in m.as_row()) + "\n")
                if on_step is not None:
                    on_step(m)
        except DivergenceError as exc:
            (out / "divergence.json").write_text(json.dumps(
                {"message": str(exc), **{k: v for k, v in exc.dump.items()}},
                indent=2, sort_keys=True, default=str) + "\n")
            (out / "manifest.json").write_text(_manifest(config, state.step, "diverged",
                                                         {**artifacts, "divergence": "divergence.json"}))
            raise

    save_checkpoint(state, config, out / "checkpoint")
    artifacts["checkpoint"] = "checkpoint/manifest.json"
    if plots:
        plot_metrics(metrics_path, out / "plots")
        artifacts["plots"] = "plots"
    (out / "manifest.json").write_text(_manifest(config, state.step, "complete", artifacts))
    return RunReport(metrics_path, snapshot, config.config_hash(), history[-1] if history else None,
                     time.perf_counter() - start, history, state)


def final_success(metrics: Sequence[StepMetrics], window: int = 20) -> float:
    """Mean reward over the trailing ``window`` steps."""
    if not metrics:
        raise ContractError("no metrics recorded")
    return float(np.mean([m.mean_reward for m in metrics[-window:]]))


@dataclass
class Comparison:
    algos: list
    seeds: list
    finals: dict
    table_path: Path
    curve_paths: list

    def median(self, algo: str) -> float:
        return float(np.median(self.finals[algo]))

    def rows(self) -> list:
        return [(a, len(self.seeds), self.median(a), float(np.min(self.finals[a])), float(np.max(self.finals[a])),
                 *self.finals[a]) for a in self.algos]


def compare_algorithms(base: RunConfig, algos: Sequence[str], seeds: Sequence[int], out_dir,
                       final_window: int = 20, plots: bool = True, match_env_seed: bool = True) -> Comparison:
    """Run every (algo, seed) pair and tabulate median final success.

    ``match_env_seed`` ties each run's environment seed to its training seed so
    all algorithms see the same task instance for a given seed.
    """
    if len(algos) < 2:
        raise ContractError("comparison needs at least two algorithms")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels, finals, curves = [], {}, {}
    for algo in algos:
        label = algo
        n = 2
        while label in finals:
            label = f"{algo}-{n}"
            n += 1
        labels.append(label)
        finals[label], runs = [], []
        for seed in seeds:
            cfg = base.replace(algo=algo, seed=int(seed), output_dir=str(out / label / f"seed_{seed}"),
                               **({"env_seed": int(seed)} if match_env_seed else {}))
            report = run_experiment(cfg)
            finals[label].append(final_success(report.metrics, final_window))
            runs.append(report)
        curves[label] = {name: np.mean([r.column(name) for r in runs], axis=0) for name in CURVE_METRICS}

    cmp = Comparison(labels, [int(s) for s in seeds], finals, out / "comparison.csv", [])
    header = ["algo", "n_seeds", "median_final_reward", "min_final_reward", "max_final_reward"] + \
             [f"seed_{s}" for s in seeds]
    write_table_csv(header, cmp.rows(), cmp.table_path)
    if plots:
        steps = np.arange(base.total_steps)
        for name in CURVE_METRICS:
            p = out / f"curve_{name}.svg"
            line_chart_svg({a: (steps, curves[a][name]) for a in labels}, p, title=f"{name} (seed mean)", ylabel=name)
            cmp.curve_paths.append(p)
    return cmp
