import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delibopt import harness
from delibopt.a2oc import EpisodeRecord
from delibopt.cli import main
from delibopt.gridworld import ladder_layout, plus_layout
from delibopt.mdp import ValidationError
from delibopt.options import Theta, Trajectory, execute

CONFIG = """
[environment]
name = "plus"
gamma = 0.95

[a2oc]
total_steps = 3000
n_options = 2

[sweep]
eta = [0.0, 0.02]
seeds = [0, 1]

[output]
dir = "{out}"
"""


def write_config(tmp_path, out="runs", text=CONFIG):
    path = tmp_path / "exp.toml"
    path.write_text(text.format(out=out))
    return path


def test_run_writes_expected_files(tmp_path, capsys):
    cfg = write_config(tmp_path, tmp_path / "runs")
    assert main(["run", str(cfg)]) == 0
    root = tmp_path / "runs"
    assert len(list(root.glob("eta_*/seed_*/metrics.csv"))) == 4
    assert len(list(root.glob("**/summary.json"))) == 1
    for run in root.glob("eta_*/seed_*"):
        for name in ("params.json", "trajectory.json", "run.json"):
            assert (run / name).exists()
    summary = json.loads((root / "summary.json").read_text())
    assert {(r["eta"], r["seed"]) for r in summary["runs"]} == {
        (0.0, 0), (0.0, 1), (0.02, 0), (0.02, 1)}
    assert "eta=0.02 seed=1" in capsys.readouterr().out


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, tmp_path / "a")
    assert main(["run", str(cfg)]) == 0
    cfg2 = write_config(tmp_path, tmp_path / "b")
    assert main(["run", str(cfg2)]) == 0
    for f in (tmp_path / "a").glob("eta_*/seed_*/metrics.csv"):
        twin = tmp_path / "b" / f.relative_to(tmp_path / "a")
        assert f.read_bytes() == twin.read_bytes()


def test_sweep_uses_processes(tmp_path):
    cfg = write_config(tmp_path, tmp_path / "par")
    assert main(["sweep", str(cfg), "--jobs", "2"]) == 0
    serial = write_config(tmp_path, tmp_path / "ser")
    assert main(["run", str(serial)]) == 0
    a = sorted((tmp_path / "par").glob("eta_*/seed_*/metrics.csv"))
    assert len(a) == 4
    for f in a:
        assert f.read_bytes() == (tmp_path / "ser" / f.relative_to(tmp_path / "par")).read_bytes()


def test_eta_grid(tmp_path):
    text = CONFIG.replace("eta = [0.0, 0.02]", "eta_range = [0.03, 0.005]")
    config = harness.load_config(write_config(tmp_path, "x", text))
    assert config.eta_sweep == [0.0, 0.005, 0.01, 0.015, 0.02, 0.025, 0.03]
    assert len(harness.eta_grid()) == 7


def test_output_root_override(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(tmp_path / "elsewhere"))
    config = harness.load_config(write_config(tmp_path, "rel"))
    assert config.resolved_output() == tmp_path / "elsewhere" / "rel"
    monkeypatch.delenv(harness.OUTPUT_ROOT_ENV)
    assert harness.load_config(write_config(tmp_path, "rel")).resolved_output() == Path("rel")


def test_bad_configs_exit_nonzero(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["run", str(tmp_path / "missing.toml")]) != 0
    assert "cannot read config" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    for text in ("[sweep]\neta = []\n", "[sweep]\nseeds = []\n", "[a2oc]\nlr_beta = -1\n",
                 "[a2oc]\nmystery = 1\n", "[environment]\nname = 'mars'\n", "not toml ==",
                 "[extra]\nx = 1\n"):
        bad.write_text(text)
        assert main(["run", str(bad)]) != 0
        assert "error" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()


# --------------------------------------------------------------- metrics CSV


def test_metrics_header(tmp_path):
    harness.write_metrics(tmp_path / "m.csv", [EpisodeRecord(10, 1, 0.5, 0.25, 3, 2, 10)])
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "episode", "return", "mean_termination", "switches",
                       "active_options"]
    assert rows[1] == ["10", "1", "0.5", "0.25", "3", "2"]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**9), st.floats(-1e6, 1e6), st.floats(0.0, 1.0),
                          st.integers(0, 1000), st.integers(1, 8)), max_size=20))
def test_metrics_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "m.csv"
    records = [EpisodeRecord(s, i + 1, r, t, sw, act, 1) for i, (s, r, t, sw, act) in
               enumerate(rows)]
    harness.write_metrics(path, records)
    back = harness.read_metrics(path)
    assert back["step"].tolist() == [r.step for r in records]
    assert back["return"].tolist() == [r.ret for r in records]
    assert back["mean_termination"].tolist() == [r.mean_termination for r in records]
    assert back["switches"].tolist() == [r.switches for r in records]


# --------------------------------------------------------------- rendering


def rollout(layout, beta_logit, n_options, seed=0, horizon=40):
    mdp = layout.to_mdp(0.95)
    rng = np.random.default_rng(seed)
    th = Theta.random(mdp.n_states, mdp.n_actions, n_options, rng)
    th = th.replace(theta_beta=np.full_like(th.theta_beta, beta_logit))
    return execute(mdp, th, layout.state_of(layout.start), rng, horizon)


def test_single_option_uniform_coloring():
    layout = ladder_layout()
    traj = rollout(layout, 0.0, 1)
    text, svg = harness.render_trajectory(layout, traj, "options")
    marks = {ch for ch in text if ch not in "#.SG\n"}
    assert marks == {"0"}
    assert "option-1" not in svg and "option-0" in svg


def test_always_terminating_marks_visited_cells():
    layout = ladder_layout()
    traj = rollout(layout, np.inf, 3)
    text, _ = harness.render_trajectory(layout, traj, "terminations")
    grid = text.splitlines()
    visited = {layout.cell_of(s) for s in traj.states[1:]}
    assert all(grid[r][c] == "x" for r, c in visited)
    assert sum(row.count("x") for row in grid) == len(visited)


def test_rendering_is_pure_and_checks_bounds():
    layout = plus_layout()
    traj = rollout(layout, 0.0, 2)
    assert harness.render_trajectory(layout, traj, "options") == \
        harness.render_trajectory(layout, traj, "options")
    bad = Trajectory([0, 999], [0, 0], [0, 0], [0.0, 0.0], [False, True])
    with pytest.raises(ValidationError):
        harness.render_trajectory(layout, bad, "options")
    with pytest.raises(ValidationError):
        harness.render_trajectory(layout, traj, "colours")


def test_render_command(tmp_path, capsys):
    layout = plus_layout()
    traj = rollout(layout, 0.0, 2)
    (tmp_path / "t.json").write_text(json.dumps(traj.to_dict()))
    assert main(["render", "plus", str(tmp_path / "t.json"), "--mode", "terminations"]) == 0
    assert (tmp_path / "t_terminations.svg").read_text().startswith("<svg")
    assert "#" in capsys.readouterr().out
    assert main(["render", "plus", str(tmp_path / "nope.json")]) != 0


def test_intersection_maze_switch_locations(tmp_path):
    maze = tmp_path / "ladder.txt"
    maze.write_text(ladder_layout().to_ascii())
    text = f"""
[environment]
layout = "{maze}"
[a2oc]
total_steps = 100000
n_options = 4
[sweep]
eta = [0.02]
seeds = [0]
[output]
dir = "{tmp_path / 'maze'}"
"""
    cfg = tmp_path / "maze.toml"
    cfg.write_text(text)
    summary = harness.run_experiment(harness.load_config(cfg))
    run = summary["runs"][0]
    frac = run["switches_at_intersections"]
    print(f"ladder maze, eta=0.02: rollout switches at intersections {frac}; expected share "
          f"{run['switch_share_at_cells']:.3f} vs visit share {run['visit_share_at_cells']:.3f}")
    assert math.isnan(frac) or 0.0 <= frac <= 1.0
    assert 0.0 <= run["switch_share_at_cells"] <= 1.0
    assert 0.0 < run["visit_share_at_cells"] < 1.0


def test_switch_profile_hand_case():
    layout = plus_layout(arm=1)
    mdp = layout.to_mdp(0.9)
    th = Theta.random(mdp.n_states, 4, 2, np.random.default_rng(0))
    th = th.replace(theta_beta=np.full_like(th.theta_beta, np.inf))
    prof = harness.switch_profile(mdp, layout, th, layout.intersections())
    # always terminating: switches follow arrivals, i.e. visits after the first step
    assert prof["switch_share_at_cells"] > 0


# --------------------------------------------------------------- aggregation


def test_aggregate_single_run(tmp_path):
    text = CONFIG.replace("eta = [0.0, 0.02]", "eta = [0.01]").replace("seeds = [0, 1]",
                                                                        "seeds = [4]")
    cfg = write_config(tmp_path, tmp_path / "one", text)
    assert main(["run", str(cfg)]) == 0
    result = harness.aggregate_sweep(tmp_path / "one")
    assert len(result["rows"]) == 1
    eta, seed, ret, term, auc = result["rows"][0]
    assert (eta, seed) == (0.01, 4)
    assert result["means"][0.01]["final_return"] == ret
    assert result["means"][0.01]["final_mean_termination"] == term
    with open(tmp_path / "one" / "sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(harness.SWEEP_COLUMNS) and len(rows) == 2
    dat = (tmp_path / "one" / "termination.dat").read_text().splitlines()
    assert dat[0].startswith("#") and len(dat) == 51


def test_aggregate_skips_missing(tmp_path, capsys):
    cfg = write_config(tmp_path, tmp_path / "runs")
    assert main(["run", str(cfg)]) == 0
    (tmp_path / "runs" / "eta_0.02" / "seed_1" / "metrics.csv").unlink()
    with pytest.warns(UserWarning, match="skipping"):
        result = harness.aggregate_sweep(tmp_path / "runs")
    assert len(result["rows"]) == 3 and len(result["skipped"]) == 1
    assert result["means"][0.02]["n"] == 1
    assert main(["aggregate", str(tmp_path / "runs")]) == 0
    assert "warning" in capsys.readouterr().err


def test_aggregate_empty_dir(tmp_path):
    assert main(["aggregate", str(tmp_path)]) != 0
