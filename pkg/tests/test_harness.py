import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from conftest import CONFIGS
from sapolab.config import RunConfig
from sapolab.envs import EnvSpec
from sapolab.exceptions import ConfigError, DivergenceError, ParseError
from sapolab.harness import (
    METRICS_HEADER,
    compare_algorithms,
    dump_trajectories,
    load_trajectories,
    read_metrics_csv,
    run_experiment,
)
from sapolab.harness.cli import main
from sapolab.optim import collect, init_learner
from sapolab.synthetic import SMALL_ENV, SMALL_FEATURES

GOLDEN_HEADER = "step,mean_reward,policy_obj,value_loss,mean_entropy,mean_resp_len,clip_frac,mean_abs_mu,mean_M"


def small_config(tmp_path, **kw):
    base = dict(env=SMALL_ENV, features=SMALL_FEATURES, batch_size=16, minibatch_count=2, total_steps=3,
                output_dir=str(tmp_path / "run"))
    base.update(kw)
    return RunConfig(**base)


# trajectory JSONL

def test_trajectory_roundtrip_is_exact(tmp_path):
    cfg = small_config(tmp_path, batch_size=100)
    batch, _ = collect(init_learner(cfg), cfg)
    path = tmp_path / "t.jsonl"
    assert dump_trajectories(batch, path) == 100
    recs = load_trajectories(path)
    assert len(recs) == 100
    for i, rec in enumerate(recs):
        assert rec.id == i
        assert rec.trajectory == batch.trajectories[i]
        assert rec.segmentation == batch.segmentations[i]
        # 17 significant digits survive: bitwise float equality
        assert np.array_equal(rec.trajectory.old_logprobs, batch.trajectories[i].old_logprobs)
    dump_trajectories(recs, tmp_path / "u.jsonl")
    assert (tmp_path / "u.jsonl").read_bytes() == path.read_bytes()


def test_empty_file_loads_empty(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_trajectories(tmp_path / "e.jsonl") == []


def _record(**over):
    rec = {"id": 0, "prompt": [1], "tokens": [2, 3, 4, 5], "old_logprobs": [-1.0] * 4,
           "entropies": [0.5] * 4, "reward": 1.0, "boundaries": [2, 4]}
    rec.update(over)
    return json.dumps(rec)


def test_bad_boundaries_rejected_with_location(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(_record() + "\n" + _record(id=1, boundaries=[4, 2]) + "\n")
    with pytest.raises(ParseError) as info:
        load_trajectories(p)
    assert info.value.line == 2 and info.value.key == "boundaries"
    assert "segmentation invariant violated" in str(info.value)
    p.write_text(_record(boundaries=[2, 3]) + "\n")
    with pytest.raises(ParseError, match="missing final boundary"):
        load_trajectories(p)


@pytest.mark.parametrize("over,key", [
    ({"tokens": "abc"}, "tokens"),
    ({"reward": "1"}, "reward"),
    ({"old_logprobs": [-1.0]}, "tokens"),
])
def test_malformed_fields_name_the_key(tmp_path, over, key):
    p = tmp_path / "bad.jsonl"
    p.write_text(_record(**over) + "\n")
    with pytest.raises(ParseError) as info:
        load_trajectories(p)
    assert info.value.key == key and info.value.line == 1


def test_missing_key_and_bad_json(tmp_path):
    p = tmp_path / "bad.jsonl"
    obj = json.loads(_record())
    del obj["entropies"]
    p.write_text(json.dumps(obj) + "\n")
    with pytest.raises(ParseError) as info:
        load_trajectories(p)
    assert info.value.key == "entropies"
    p.write_text("{not json\n")
    with pytest.raises(ParseError):
        load_trajectories(p)


# metrics and run directory

def test_zero_steps_gives_header_only(tmp_path):
    report = run_experiment(small_config(tmp_path, total_steps=0))
    assert report.metrics_path.read_text() == GOLDEN_HEADER + "\n"
    assert METRICS_HEADER == GOLDEN_HEADER
    assert report.final_metrics is None


def test_run_writes_rows_and_artifacts(tmp_path):
    cfg = small_config(tmp_path, total_steps=2, dump_interval=1)
    report = run_experiment(cfg, plots=True)
    data = read_metrics_csv(report.metrics_path)
    assert list(data["step"]) == [0.0, 1.0]
    assert np.all(data["value_loss"] >= 0) and np.all((data["mean_reward"] >= 0) & (data["mean_reward"] <= 1))
    out = tmp_path / "run"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.config_hash() == report.config_hash
    assert manifest["status"] == "complete" and manifest["step"] == 2
    assert RunConfig.load(out / "config.json") == cfg
    assert sorted(p.name for p in (out / "trajectories").iterdir()) == ["step_000000.jsonl", "step_000001.jsonl"]
    assert len(load_trajectories(out / "trajectories" / "step_000001.jsonl")) == 16
    for svg in (out / "plots").glob("*.svg"):
        ET.parse(svg)
    ckpt = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert ckpt["config_hash"] == cfg.config_hash()


def test_same_seed_same_bytes(tmp_path):
    a = run_experiment(small_config(tmp_path, output_dir=str(tmp_path / "a")), plots=True)
    b = run_experiment(small_config(tmp_path, output_dir=str(tmp_path / "b")), plots=True)
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    # config.json and manifests differ only through output_dir, which is part of the config
    for name in ("plots/mean_reward.svg", "checkpoint/policy.ckpt", "checkpoint/value.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = run_experiment(small_config(tmp_path, seed=1, output_dir=str(tmp_path / "c")))
    assert c.metrics_path.read_bytes() != a.metrics_path.read_bytes()


def test_bad_metrics_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("step,reward\n0,1\n")
    with pytest.raises(ParseError):
        read_metrics_csv(p)


def test_divergence_writes_state_dump(tmp_path):
    cfg = small_config(tmp_path, lr_policy=1e308)
    with pytest.warns(RuntimeWarning), pytest.raises(DivergenceError):
        run_experiment(cfg)
    dump = json.loads((tmp_path / "run" / "divergence.json").read_text())
    assert dump["quantity"] == "policy objective" and dump["step"] == 0
    assert json.loads((tmp_path / "run" / "manifest.json").read_text())["status"] == "diverged"


# comparisons

def test_compare_duplicate_algo_identical(tmp_path):
    cfg = small_config(tmp_path, total_steps=2)
    cmp = compare_algorithms(cfg, ["sapo", "sapo", "ppo"], [0, 1], tmp_path / "cmp", final_window=2)
    assert cmp.algos == ["sapo", "sapo-2", "ppo"]
    assert cmp.finals["sapo"] == cmp.finals["sapo-2"]
    rows = cmp.table_path.read_text().splitlines()
    assert rows[0] == "algo,n_seeds,median_final_reward,min_final_reward,max_final_reward,seed_0,seed_1"
    assert rows[1].split(",")[1:] == rows[2].split(",")[1:]
    assert len(cmp.curve_paths) == 4
    for p in cmp.curve_paths:
        root = ET.parse(p).getroot()
        assert root.tag.endswith("svg")


# command line

def _write(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(cfg.to_json())
    return str(p)


def test_cli_train_and_exit_codes(tmp_path, capsys):
    cfg = small_config(tmp_path, total_steps=1)
    assert main(["train", "--config", _write(tmp_path, cfg)]) == 0
    assert (tmp_path / "run" / "metrics.csv").read_text().count("\n") == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "broken.json").write_text('{"algo": "sapo", "nonsense": 1}')
    assert main(["train", "--config", str(tmp_path / "broken.json")]) == 2
    (tmp_path / "neg.json").write_text('{"batch_size": 0}')
    assert main(["train", "--config", str(tmp_path / "neg.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_divergence_exit_code(tmp_path):
    cfg = small_config(tmp_path, lr_policy=1e308)
    with pytest.warns(RuntimeWarning):
        assert main(["train", "--config", _write(tmp_path, cfg)]) == 1
    assert (tmp_path / "run" / "divergence.json").exists()


def test_cli_segment_roundtrip(tmp_path):
    cfg = small_config(tmp_path)
    batch, _ = collect(init_learner(cfg), cfg)
    src, dst = tmp_path / "in.jsonl", tmp_path / "out.jsonl"
    dump_trajectories(batch, src)
    assert main(["segment", "--config", _write(tmp_path, cfg), "--k", "100", str(src), str(dst)]) == 0
    for rec in load_trajectories(dst):
        assert rec.segmentation.M == rec.trajectory.T
    (tmp_path / "bad.jsonl").write_text(_record(boundaries=[4, 2]) + "\n")
    assert main(["segment", str(tmp_path / "bad.jsonl"), str(dst)]) == 2


def test_cli_analysis_commands(tmp_path):
    assert main(["bias-check", "--n-cases", "500", "--out", str(tmp_path / "bias.jsonl")]) == 0
    assert main(["grad-check", "--n-configs", "2"]) == 0
    out = tmp_path / "lift"
    assert main(["lift", "--synthetic", "coupled", "--n-steps", "12", "--n-tokens", "300", "--out", str(out)]) == 0
    assert any(out.iterdir())
    # 6 steps smoothed over 5 leave 2 points: the trend correlation is undefined
    assert main(["lift", "--synthetic", "coupled", "--n-steps", "6", "--n-tokens", "300", "--out", str(out)]) == 2
    assert main(["enumerate", "--config", str(CONFIGS / "tiny_tree.json"), "--out", str(tmp_path / "e.jsonl")]) == 0
    assert len((tmp_path / "e.jsonl").read_text().splitlines()) == 8


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "sapolab.harness.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train" in res.stdout


def test_shipped_configs_load():
    for p in CONFIGS.glob("*.json"):
        cfg = RunConfig.load(p)
        assert isinstance(cfg.env, EnvSpec)
    with pytest.raises(ConfigError):
        RunConfig.from_json("{")
