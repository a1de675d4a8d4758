"""Scenario corpus, config parsing, and command-line interface tests."""

import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from irlplan.config import (ConfigError, apply_env_overrides, get,
                            load_config, parse_config, parse_scalar)
from irlplan.scenarios import (DEFAULT_MIX, SCRIPTS, generate_scenario,
                               generate_synthetic_scenarios, load_scenarios,
                               save_scenarios)
from irlplan.simulate import (LON_ACCEL_BOUNDS, ROLLOUT_TICKS,
                              compute_metrics, front_collision,
                              run_closed_loop)
from irlplan.planners import PlannerKind, make_planner
from irlplan.cli import main


# --- scenarios ---------------------------------------------------------------

def test_generation_deterministic_per_seed():
    a = generate_scenario("lead_brake", 3)
    b = generate_scenario("lead_brake", 3)
    assert np.array_equal(a.expert.xy(), b.expert.xy())
    assert len(a.agents) == len(b.agents)
    for ra, rb in zip(a.agents, b.agents):
        assert np.array_equal(ra.xs, rb.xs)
    c = generate_scenario("lead_brake", 4)
    assert not np.array_equal(a.expert.xy(), c.expert.xy())


def test_unknown_script_rejected():
    with pytest.raises(ValueError):
        generate_scenario("nope", 0)


def test_mix_respected():
    recs = generate_synthetic_scenarios(20, seed=0,
                                        mix={"free_flow": 0.5, "turn": 0.5})
    scripts = {r.script for r in recs}
    assert scripts <= {"free_flow", "turn"}
    assert len(scripts) == 2
    assert len(recs) == 20
    assert len({r.scenario_id for r in recs}) == 20


def test_default_mix_covers_all_scripts():
    assert set(DEFAULT_MIX) == set(SCRIPTS)
    assert sum(DEFAULT_MIX.values()) == pytest.approx(1.0)


def test_save_load_bit_exact(tmp_path):
    recs = generate_synthetic_scenarios(8, seed=1)
    path = tmp_path / "scenarios.jsonl"
    save_scenarios(path, recs)
    loaded = load_scenarios(path)
    assert len(loaded) == len(recs)
    for a, b in zip(recs, loaded):
        assert a.scenario_id == b.scenario_id
        assert a.script == b.script
        assert np.array_equal(a.expert.xy(), b.expert.xy())
        assert np.array_equal(a.expert.speeds(), b.expert.speeds())
        assert np.array_equal(a.route.points, b.route.points)
        for ra, rb in zip(a.agents, b.agents):
            assert np.array_equal(ra.xs, rb.xs)
            assert np.array_equal(ra.vs, rb.vs)


def test_lead_brake_has_braking_lead():
    sc = generate_scenario("lead_brake", 0)
    assert len(sc.agents) >= 1
    lead = sc.agents[0]
    assert lead.vs.min() < lead.vs.max()  # actually brakes
    assert lead.vs[-1] <= lead.vs[0]


def test_free_flow_has_no_agents():
    sc = generate_scenario("free_flow", 2)
    assert len(sc.agents) == 0


@pytest.mark.parametrize("script", SCRIPTS)
def test_expert_is_comfortable_and_collision_free(script):
    sc = generate_scenario(script, 1)
    ro = run_closed_loop(sc, make_planner(PlannerKind.EXPERT_REPLAY,
                                          scenario=sc))
    assert not front_collision(ro, sc)
    m = compute_metrics(ro, sc)
    assert m.comfort["lon_accel_ok"]
    assert m.comfort["lon_jerk_ok"]
    v = sc.expert.speeds()
    acc = np.diff(v) / sc.expert.dt
    assert np.all(acc > LON_ACCEL_BOUNDS[0])
    assert np.all(acc < LON_ACCEL_BOUNDS[1])


# --- config ------------------------------------------------------------------

def test_parse_scalars():
    assert parse_scalar("true") is True
    assert parse_scalar("false") is False
    assert parse_scalar("3") == 3
    assert isinstance(parse_scalar("3"), int)
    assert parse_scalar("3.5") == 3.5
    assert parse_scalar("1e-3") == 1e-3
    assert parse_scalar('"quoted str"') == "quoted str"
    assert parse_scalar("bare") == "bare"


def test_parse_config_full():
    cfg = parse_config("""
# comment
train.lr_init = 1e-3
train.epochs = 20
scenarios.count = 200  # trailing comment ignored only if quoted? no: kept
mix.free_flow = 0.4
evaluate.planners = learned, idm
flag = true
name = "hello world"
""")
    assert cfg["train.lr_init"] == 1e-3
    assert cfg["train.epochs"] == 20
    assert cfg["mix.free_flow"] == 0.4
    assert cfg["evaluate.planners"] == ("learned", "idm")
    assert cfg["flag"] is True
    assert cfg["name"] == "hello world"


def test_parse_config_errors():
    with pytest.raises(ConfigError):
        parse_config("no equals sign here")
    with pytest.raises(ConfigError):
        parse_config("bad key! = 3")
    with pytest.raises(ConfigError):
        parse_config("a = 1\na = 2")  # duplicate key


def test_env_overrides():
    cfg = {"train.lr_init": 1e-3}
    env = {"IRLPLAN_TRAIN__LR_INIT": "5e-4", "IRLPLAN_SEED": "7",
           "UNRELATED": "x"}
    out = apply_env_overrides(cfg, environ=env)
    assert out["train.lr_init"] == 5e-4
    assert out["seed"] == 7
    assert "unrelated" not in out


def test_typed_get():
    cfg = {"a": 3, "b": 2.5, "c": True, "d": "x"}
    assert get(cfg, "a", type_=int) == 3
    assert get(cfg, "a", type_=float) == 3.0  # int promotes to float
    assert get(cfg, "missing", default=9) == 9
    with pytest.raises(ConfigError):
        get(cfg, "c", type_=int)  # bool is not an int here
    with pytest.raises(ConfigError):
        get(cfg, "d", type_=float)


def test_load_config(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 3\n")
    assert load_config(p) == {"seed": 3}


# --- CLI ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_out(tmp_path_factory):
    """One tiny end-to-end CLI run shared by the CLI assertions."""
    out = tmp_path_factory.mktemp("cli")
    cfg = out / "run.cfg"
    cfg.write_text(
        "scenarios.count = 8\n"
        "train.epochs = 2\n"
        "train.val_fraction = 0.25\n"
        "evaluate.planners = expert_replay, constant_speed\n"
    )
    args = ["--config", str(cfg), "--out", str(out), "--seed", "0"]
    assert main(["gen-scenarios", *args]) == 0
    assert main(["train", *args]) == 0
    assert main(["evaluate", *args]) == 0
    return out


def test_cli_artifacts_exist(cli_out):
    assert (cli_out / "scenarios.jsonl").exists()
    assert (cli_out / "params.dirl").exists()
    assert (cli_out / "training_log.csv").exists()
    assert (cli_out / "summary.csv").exists()
    assert (cli_out / "rollouts.jsonl").exists()


def test_cli_summary_well_formed(cli_out):
    lines = (cli_out / "summary.csv").read_text().strip().splitlines()
    assert lines[0].split(",")[:4] == ["planner", "safety", "comfort",
                                       "progress"]
    planners = {line.split(",")[0] for line in lines[1:]}
    assert planners == {"expert_replay", "constant_speed"}
    for line in lines[1:]:
        if line.startswith("expert_replay"):
            fields = line.split(",")
            assert float(fields[1]) == 1.0  # safety
            assert float(fields[3]) == 1.0  # progress
            assert float(fields[4]) == 0.0  # l2_with_yaw


def test_cli_rollouts_jsonl_parses(cli_out):
    with open(cli_out / "rollouts.jsonl") as f:
        rows = [json.loads(line) for line in f]
    assert len(rows) == 16  # 8 scenarios x 2 planners
    for row in rows:
        for key in ("x", "y", "theta", "v"):
            assert len(row[key]) == ROLLOUT_TICKS + 1
        assert set(row) >= {"scenario_id", "planner", "metrics", "tags",
                            "wall_time_s"}


def test_cli_simulate_prints_metrics(cli_out, capsys):
    args = ["--out", str(cli_out), "--seed", "0", "--planner",
            "constant_speed", "--index", "0"]
    assert main(["simulate", *args]) == 0
    out = json.loads(capsys.readouterr().out)
    assert "metrics" in out and "scenario_id" in out


def test_cli_missing_scenarios_fails_with_stage(tmp_path, capsys):
    rc = main(["train", "--out", str(tmp_path), "--seed", "0"])
    assert rc == 1
    err = capsys.readouterr().err
    assert "irlplan train" in err


def test_cli_no_temp_files_left(cli_out):
    leftovers = [p for p in os.listdir(cli_out) if p.startswith("tmp")]
    assert leftovers == []


def test_cli_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "irlplan.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-scenarios" in proc.stdout
