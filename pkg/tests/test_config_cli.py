import copy
import random
from pathlib import Path

import numpy as np
import pytest
import yaml

from sgsroute import harness
from sgsroute.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAIL, EXIT_OK, main
from sgsroute.config import PRESETS, ConfigError, load_config, parse_config, preset

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TOY = copy.deepcopy(PRESETS["toy_n2"])
TOY.update(horizon=5000, snapshot_every=1000, eval_horizon=2000, replications=3)


def write_cfg(tmp_path, raw, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


def test_presets_and_shipped_configs_parse():
    for name in PRESETS:
        cfg = preset(name)
        assert cfg.basis.n_servers == cfg.system.n_servers
    a = load_config(CONFIGS / "paper_n3.yaml")
    assert a.system.lam == 2.0 and a.system.mu == (0.5, 2.5, 5.0) and a.iota == 0.01
    assert load_config(CONFIGS / "toy_n2.yaml").oracle["x_max"] == 8
    with pytest.raises(ConfigError):
        preset("nope")


@pytest.mark.parametrize("mutate", [
    lambda r: r.update(typo=1),
    lambda r: r["learner"].update(alpha=0.1),
    lambda r: r["system"].update(rate=1.0),
    lambda r: r.update(eval_horizon=0),
    lambda r: r.update(compare=["sgs", "nns"]),
    lambda r: r.update(horizon=1.5),
    lambda r: r["system"].update(mu=[1.0, -1.0]),
])
def test_invalid_configs_rejected(mutate):
    raw = copy.deepcopy(TOY)
    mutate(raw)
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_digest_tracks_content():
    a, b = parse_config(TOY), parse_config(copy.deepcopy(TOY))
    assert a.digest() == b.digest()
    assert a.with_overrides(seed=5).digest() != a.digest()


def test_cli_train_writes_reproducible_artifacts(tmp_path):
    cfg = write_cfg(tmp_path, TOY)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("metrics.csv", "weights.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "trace.csv").read_text().splitlines()[0]
    assert header.startswith("k,wall_time,w0,")
    meta = yaml.safe_load((tmp_path / "a" / "metadata.yaml").read_text())
    assert meta["seed"] == 0 and len(meta["config_hash"]) == 64 and "version" in meta
    assert main(["train", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "c")]) == EXIT_OK
    assert (tmp_path / "c" / "metrics.csv").read_bytes() != (tmp_path / "a" / "metrics.csv").read_bytes()


def test_cli_zero_horizon_train(tmp_path):
    cfg = write_cfg(tmp_path, {**TOY, "horizon": 0})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "z")]) == EXIT_OK
    lines = (tmp_path / "z" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("k,")


def test_cli_exit_codes(tmp_path):
    bad = write_cfg(tmp_path, {**TOY, "typo": 1}, "bad.yaml")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    zero = write_cfg(tmp_path, {**TOY, "eval_horizon": 0}, "zero.yaml")
    assert main(["evaluate", "--config", str(zero), "--policy", "jsq", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    ok = write_cfg(tmp_path, TOY)
    assert main(["evaluate", "--config", str(ok), "--policy", "jsq", "--horizon", "0",
                 "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    harness.save_weights(tmp_path / "w3.csv", np.ones(3))
    assert main(["evaluate", "--config", str(ok), "--weights", str(tmp_path / "w3.csv"),
                 "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    unstable = write_cfg(tmp_path, {**TOY, "system": {"lam": 3.0, "mu": [1.0, 1.0]}}, "unstable.yaml")
    assert main(["train", "--config", str(unstable), "--out", str(tmp_path / "u")]) == EXIT_CONFIG
    short = write_cfg(tmp_path, {**TOY, "horizon": 100, "system": {"lam": 3.0, "mu": [1.0, 1.0]}}, "short.yaml")
    assert main(["train", "--config", str(short), "--force", "--out", str(tmp_path / "u")]) == EXIT_OK
    div = write_cfg(tmp_path, {**TOY, "learner": {**TOY["learner"], "w_ceiling": 1.0}}, "div.yaml")
    assert main(["train", "--config", str(div), "--out", str(tmp_path / "d")]) == EXIT_DIVERGED
    assert (tmp_path / "d" / "divergence.yaml").exists()


def test_cli_check(tmp_path, capsys):
    assert main(["check", "--preset", "paper_n3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "result: pass" in out
    raw = copy.deepcopy(PRESETS["paper_n3"])
    raw["system"]["lam"] = 10.0
    p = write_cfg(tmp_path, raw)
    assert main(["check", "--config", str(p)]) == EXIT_FAIL
    report = yaml.safe_load(capsys.readouterr().out.split("result:")[0])
    assert report["stabilizable"] is False


def test_cli_evaluate_and_compare(tmp_path):
    cfg = write_cfg(tmp_path, TOY)
    assert main(["compare", "--config", str(cfg), "--out", str(tmp_path / "cmp")]) == EXIT_OK
    rows = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()
    assert rows[0] == "policy,average_cost,cost_se,normalized_cost,mean_queue"
    sgs = rows[1].split(",")
    assert sgs[0] == "sgs" and float(sgs[3]) == 1.0
    assert "JSQ/SGS cost ratio" in (tmp_path / "cmp" / "comparison.txt").read_text()
    w = tmp_path / "cmp" / "weights.csv"
    assert main(["evaluate", "--config", str(cfg), "--weights", str(w), "--out", str(tmp_path / "ev")]) == EXIT_OK
    assert len((tmp_path / "ev" / "evaluate_sgs_replications.csv").read_text().splitlines()) == 4


def test_replication_results_ignore_execution_order():
    cfg = parse_config(TOY)
    jobs = [(cfg.raw, "jsq", None, r) for r in range(cfg.replications)]
    forward = {r[0]: r[1:3] for r in map(harness._eval_one, jobs)}
    shuffled = jobs[:]
    random.Random(0).shuffle(shuffled)
    again = {r[0]: r[1:3] for r in map(harness._eval_one, shuffled)}
    assert forward == again
    par = harness.evaluate_policy(cfg, "jsq", workers=2)
    assert par.costs.tolist() == [forward[r][0] for r in range(cfg.replications)]


def test_comparison_table_normalization():
    mk = lambda name, c: harness.Row(name, np.array(c), np.array([1.0, 1.0]), 0.0)  # noqa: E731
    t = harness.ComparisonTable([mk("sgs", [1.0, 1.2]), mk("jsq", [2.0, 2.2])])
    assert t.normalized("sgs") == 1.0
    scaled = harness.ComparisonTable([mk("sgs", [3.0, 3.6]), mk("jsq", [6.0, 6.6])])
    assert scaled.normalized("jsq") == pytest.approx(t.normalized("jsq"), rel=1e-15)
    single = harness.ComparisonTable([mk("jsq", [2.0, 2.2])])
    assert single.base == "jsq" and single.normalized("jsq") == 1.0 and len(single.rows) == 1


def test_cli_oracle_and_diagnose(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**TOY, "save_trajectory": "npz", "horizon": 20_000})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == EXIT_OK
    w = tmp_path / "t" / "weights.csv"
    capsys.readouterr()
    assert main(["oracle", "--config", str(cfg), "--weights", str(w), "--out", str(tmp_path / "o")]) == EXIT_OK
    summary = yaml.safe_load(capsys.readouterr().out)
    assert summary["boundary_mass_d_star"] < 1e-6
    for name in ("q_star.csv", "pi_star.csv", "d_star.csv", "w_star.csv", "w_fixed.csv", "oracle.yaml"):
        assert (tmp_path / "o" / name).exists()
    assert main(["diagnose", "--config", str(cfg), "--trajectory", str(tmp_path / "t" / "trajectory.npz"),
                 "--weights", str(w), "--trace", str(tmp_path / "t" / "metrics.csv"),
                 "--target", str(tmp_path / "o" / "w_fixed.csv"), "--out", str(tmp_path / "g")]) == EXIT_OK
    for name in ("stability.csv", "tv.csv", "mgf.csv", "weight_distance.csv", "diagnostics.yaml"):
        assert (tmp_path / "g" / name).exists()
    assert main(["oracle", "--config", str(cfg), "--x-max", "4000", "--out", str(tmp_path / "o2")]) == EXIT_CONFIG
