"""Experiment plumbing: configs, eta/seed sweeps, metric files, renderings, aggregation.

Layout of an output directory::

    <output_dir>/summary.json
    <output_dir>/eta_<eta>/seed_<seed>/{metrics.csv, params.json, trajectory.json, run.json}
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .a2oc import A2OCConfig, train
from .deliberation import start_distribution
from .gradients import arrival_measure, discounted_occupancy
from .gridworld import GridLayout, four_rooms_layout, ladder_layout, plus_layout
from .mdp import Mdp, ValidationError, value_iteration
from .options import Theta, Trajectory, execute, intra_option_evaluate

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_ROOT_ENV = "DELIB_OUTPUT_ROOT"
METRIC_COLUMNS = ("step", "episode", "return", "mean_termination", "switches", "active_options")
SWEEP_COLUMNS = ("eta", "seed", "final_return", "final_mean_termination", "auc")
LAYOUTS = {"four_rooms": four_rooms_layout, "ladder": ladder_layout, "plus": plus_layout}
OPTION_COLORS = ("#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628",
                 "#f781bf", "#999999", "#66c2a5", "#ffd92f")


def eta_grid(stop: float = 0.03, step: float = 0.005) -> list[float]:
    """0, step, ..., stop (inclusive), rounded to kill float drift."""
    n = int(round(stop / step))
    return [round(i * step, 10) for i in range(n + 1)]


# --------------------------------------------------------------------------- config


@dataclass
class EnvironmentSpec:
    name: str = "four_rooms"
    layout: str | None = None  # path to an ASCII layout; overrides ``name``
    slip: float | None = None
    gamma: float = 0.99

    def build_layout(self) -> GridLayout:
        kwargs = {} if self.slip is None else {"slip": self.slip}
        if self.layout is not None:
            return GridLayout.load(self.layout, **kwargs)
        if self.name not in LAYOUTS:
            raise ValidationError(f"unknown environment {self.name!r}; "
                                  f"choose from {sorted(LAYOUTS)} or give a layout file")
        return LAYOUTS[self.name](**kwargs)


@dataclass
class ExperimentConfig:
    environment: EnvironmentSpec = field(default_factory=EnvironmentSpec)
    a2oc: dict = field(default_factory=dict)
    eta_sweep: list = field(default_factory=lambda: [0.0])
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    jobs: int = 1
    rollout_horizon: int = 500

    def __post_init__(self):
        if not self.eta_sweep:
            raise ValidationError("eta sweep is empty")
        if not self.seeds:
            raise ValidationError("seed list is empty")
        if any(e < 0 for e in self.eta_sweep):
            raise ValidationError("eta values must be >= 0")
        if len(set(self.seeds)) != len(self.seeds) or len(set(self.eta_sweep)) != len(self.eta_sweep):
            raise ValidationError("duplicate eta or seed values")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")
        for key in ("eta", "seed"):
            if key in self.a2oc:
                raise ValidationError(f"set {key} through the sweep section, not [a2oc]")
        self.learner_config(self.eta_sweep[0], self.seeds[0])  # validate early

    def learner_config(self, eta: float, seed: int) -> A2OCConfig:
        return A2OCConfig.from_mapping({**self.a2oc, "eta": float(eta), "seed": int(seed)})

    def resolved_output(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    @classmethod
    def from_mapping(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        unknown = set(doc) - {"environment", "a2oc", "sweep", "output"}
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        env = dict(doc.get("environment", {}))
        bad = set(env) - set(EnvironmentSpec.__dataclass_fields__)
        if bad:
            raise ValidationError(f"unknown [environment] keys: {sorted(bad)}")
        sweep = dict(doc.get("sweep", {}))
        bad = set(sweep) - {"eta", "eta_range", "seeds", "jobs"}
        if bad:
            raise ValidationError(f"unknown [sweep] keys: {sorted(bad)}")
        if "eta_range" in sweep:
            if "eta" in sweep:
                raise ValidationError("give either eta or eta_range, not both")
            stop, step = sweep["eta_range"]
            etas = eta_grid(float(stop), float(step))
        else:
            etas = [float(e) for e in sweep.get("eta", [0.0])]
        output = dict(doc.get("output", {}))
        bad = set(output) - {"dir", "rollout_horizon"}
        if bad:
            raise ValidationError(f"unknown [output] keys: {sorted(bad)}")
        return cls(EnvironmentSpec(**env), dict(doc.get("a2oc", {})), etas,
                   [int(s) for s in sweep.get("seeds", [0])], str(output.get("dir", "runs")),
                   int(sweep.get("jobs", 1)), int(output.get("rollout_horizon", 500)))

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"bad config {path}: {exc}") from None
    try:
        return ExperimentConfig.from_mapping(doc)
    except TypeError as exc:
        raise ValidationError(f"bad config {path}: {exc}") from None


# --------------------------------------------------------------------------- metrics files


def run_dir(root: Path, eta: float, seed: int) -> Path:
    return Path(root) / f"eta_{eta:g}" / f"seed_{seed}"


def write_metrics(path, episodes) -> None:
    """One row per finished episode. Floats use repr, so rows read back exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for e in episodes:
            writer.writerow([e.step, e.episode, repr(float(e.ret)),
                             repr(float(e.mean_termination)), e.switches, e.active_options])


def read_metrics(path) -> dict:
    """Columns of a metrics CSV as numpy arrays."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise ValidationError(f"{path}: unexpected header {header}")
        rows = list(reader)
    cols = list(zip(*rows)) if rows else [[] for _ in METRIC_COLUMNS]
    ints = {"step", "episode", "switches", "active_options"}
    return {name: np.array(col, dtype=np.int64 if name in ints else float)
            for name, col in zip(METRIC_COLUMNS, cols)}


def _dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- runs


def run_single(config: ExperimentConfig, eta: float, seed: int, root: Path | None = None) -> dict:
    """Train one (eta, seed) pair and write its files. Returns the run summary."""
    root = config.resolved_output() if root is None else Path(root)
    layout = config.environment.build_layout()
    out = run_dir(root, eta, seed)
    out.mkdir(parents=True, exist_ok=True)
    mdp = layout.to_mdp(config.environment.gamma)
    learner = config.learner_config(eta, seed)
    shared, metrics = train(lambda: mdp, learner)
    write_metrics(out / "metrics.csv", metrics.episodes)

    greedy = shared.greedy_theta()
    _dump_json(out / "params.json", {"theta": greedy.to_dict(), "q": shared.q.tolist(),
                                     "config": learner.to_dict()})
    start = layout.state_of(layout.start) if layout.start is not None else 0
    traj = execute(mdp, greedy, start, np.random.default_rng([seed, 1]),
                   config.rollout_horizon)
    doc = traj.to_dict()
    doc["cells"] = [list(layout.cell_of(s)) for s in traj.states]
    _dump_json(out / "trajectory.json", doc)

    v_star = float(mdp.initial_dist @ value_iteration(mdp, 1e-10)[0])
    greedy_value = float(mdp.initial_dist @ intra_option_evaluate(mdp, greedy).v)
    returns = [e.ret for e in metrics.episodes]
    tail = returns[-max(1, len(returns) // 10):] if returns else [float("nan")]
    summary = {
        "eta": float(eta),
        "seed": int(seed),
        "steps": int(metrics.steps),
        "episodes": len(metrics.episodes),
        "final_return": math.fsum(tail) / len(tail),
        "final_mean_termination": metrics.late_mean_termination(),
        "greedy_value": greedy_value,
        "optimal_value": v_star,
        "option_usage": [int(x) for x in metrics.option_usage],
        "switches_at_intersections": switch_fraction(layout, traj, layout.intersections()),
    }
    behaviour = greedy.replace(epsilon_mu=learner.epsilon)
    summary.update(switch_profile(mdp, layout, behaviour, layout.intersections()))
    _dump_json(out / "run.json", summary)
    return summary


def _run_job(args):
    config, eta, seed, root = args
    return run_single(config, eta, seed, root)


def run_experiment(config: ExperimentConfig, jobs: int | None = None) -> dict:
    """Every (eta, seed) pair, sequentially or in a process pool; writes summary.json."""
    config.environment.build_layout()  # fail before touching the output tree
    root = config.resolved_output()
    root.mkdir(parents=True, exist_ok=True)
    pairs = [(config, eta, seed, root) for eta in config.eta_sweep for seed in config.seeds]
    jobs = config.jobs if jobs is None else jobs
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_job, pairs))
    else:
        runs = [_run_job(p) for p in pairs]
    summary = {"config": config.to_dict(), "runs": runs}
    _dump_json(root / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------- rendering


def _visits(layout: GridLayout, trajectory: Trajectory):
    n = len(layout.walkable_cells())
    for t, s in enumerate(trajectory.states):
        if not 0 <= s < n:
            raise ValidationError(f"state {s} at step {t} is outside the layout")
        yield t, layout.cell_of(s)


def switch_fraction(layout: GridLayout, trajectory: Trajectory, cells) -> float:
    """Share of switches that happen on ``cells`` (nan when there are none)."""
    hits = [cell in cells for t, cell in _visits(layout, trajectory) if trajectory.switched[t]]
    return sum(hits) / len(hits) if hits else float("nan")


def switch_profile(mdp: Mdp, layout: GridLayout, theta: Theta, cells) -> dict:
    """Expected (discounted) share of switches and of visits that fall on ``cells``.

    Computed exactly from the occupancy of the augmented chain; absorbing states are left
    out since the chain idles there forever.
    """
    alpha = start_distribution(mdp, theta)
    occ = discounted_occupancy(mdp, theta, alpha)
    switches = np.sum(arrival_measure(mdp, theta, occ) * theta.beta(), axis=0)
    visits = occ.sum(axis=1)
    keep = np.ones(mdp.n_states, dtype=bool)
    keep[mdp.absorbing_states()] = False
    on = np.zeros(mdp.n_states, dtype=bool)
    on[[layout.state_of(c) for c in cells]] = True
    share = lambda w: float(w[on & keep].sum() / w[keep].sum()) if w[keep].sum() > 0 else float("nan")
    return {"switch_share_at_cells": share(switches), "visit_share_at_cells": share(visits)}


def render_trajectory(layout: GridLayout, trajectory: Trajectory, mode: str = "options"):
    """Text map and SVG document for one trajectory.

    ``options``: each visited cell shows the option last active there.
    ``terminations``: only cells where a new option was picked after a termination.
    """
    if mode not in ("options", "terminations"):
        raise ValidationError(f"mode must be 'options' or 'terminations', got {mode!r}")
    marks = {}
    for t, cell in _visits(layout, trajectory):
        if mode == "options":
            marks[cell] = int(trajectory.options[t])
        elif trajectory.switched[t]:
            marks[cell] = -1
    grid = [list(row) for row in layout.to_ascii().splitlines()]
    for (r, c), m in marks.items():
        grid[r][c] = "x" if m < 0 else (str(m) if m < 10 else "+")
    text = "\n".join("".join(row) for row in grid) + "\n"

    size = 20
    w, h = layout.cols * size, layout.rows * size
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>']
    for r, c in sorted(layout.walls):
        parts.append(f'<rect x="{c * size}" y="{r * size}" width="{size}" height="{size}" '
                     f'fill="#333333"/>')
    for (r, c), m in sorted(marks.items()):
        if m < 0:
            parts.append(f'<circle cx="{c * size + size / 2}" cy="{r * size + size / 2}" '
                         f'r="{size / 3}" fill="black"/>')
        else:
            color = OPTION_COLORS[m % len(OPTION_COLORS)]
            parts.append(f'<rect x="{c * size}" y="{r * size}" width="{size}" height="{size}" '
                         f'fill="{color}" class="option-{m}"/>')
    if layout.goal is not None:
        r, c = layout.goal
        parts.append(f'<text x="{c * size + 5}" y="{r * size + 15}" font-size="14">G</text>')
    parts.append("</svg>")
    return text, "\n".join(parts) + "\n"


def resolve_layout(name: str) -> GridLayout:
    """A builtin layout name or a path to an ASCII layout file."""
    if name in LAYOUTS:
        return LAYOUTS[name]()
    return GridLayout.load(name)


# --------------------------------------------------------------------------- aggregation


def _auc(data: dict, total_steps: int) -> float:
    """Step-weighted average of the episode return over training (area / steps)."""
    if len(data["step"]) == 0 or total_steps <= 0:
        return float("nan")
    lengths = np.diff(np.concatenate([[0], data["step"]]))
    return float(np.sum(lengths * data["return"]) / max(int(data["step"][-1]), 1))


def aggregate_sweep(root, n_bins: int = 50, out=None) -> dict:
    """Collect every run under ``root`` into sweep.csv, sweep_means.csv and termination.dat.

    Runs whose files are missing or unreadable are skipped with a warning.
    """
    root = Path(root)
    rows, skipped, curves = [], [], {}
    for run in sorted(root.glob("eta_*/seed_*")):
        try:
            info = json.loads((run / "run.json").read_text())
            data = read_metrics(run / "metrics.csv")
        except (OSError, ValueError, KeyError) as exc:
            skipped.append(str(run))
            warnings.warn(f"skipping {run}: {exc}", stacklevel=2)
            continue
        eta, seed = float(info["eta"]), int(info["seed"])
        rows.append((eta, seed, float(info["final_return"]),
                     float(info["final_mean_termination"]), _auc(data, info.get("steps", 0))))
        curves.setdefault(eta, []).append((data, int(info.get("steps", 0))))
    rows.sort()
    out = root if out is None else Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for eta, seed, ret, term, auc in rows:
            writer.writerow([repr(eta), seed, repr(ret), repr(term), repr(auc)])

    means = {}
    for eta in sorted({r[0] for r in rows}):
        group = np.array([r[2:] for r in rows if r[0] == eta])
        stderr = (group.std(axis=0, ddof=1) / math.sqrt(len(group)) if len(group) > 1
                  else np.zeros(3))
        means[eta] = {"n": len(group), "final_return": float(group[:, 0].mean()),
                      "final_mean_termination": float(group[:, 1].mean()),
                      "termination_stderr": float(stderr[1]), "auc": float(group[:, 2].mean())}
    with open(out / "sweep_means.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("eta", "n", "final_return", "final_mean_termination",
                         "termination_stderr", "auc"))
        for eta, m in means.items():
            writer.writerow([repr(eta), m["n"], repr(m["final_return"]),
                             repr(m["final_mean_termination"]),
                             repr(m["termination_stderr"]), repr(m["auc"])])
    (out / "termination.dat").write_text(termination_curves(curves, n_bins))
    return {"rows": rows, "means": means, "skipped": skipped}


def termination_curves(curves: dict, n_bins: int = 50) -> str:
    """Gnuplot-friendly table: bin centre then the seed-averaged termination per eta.

    Each episode's mean termination is binned by the step at which it finished; empty bins
    are written as NaN.
    """
    etas = sorted(curves)
    total = max((steps for runs in curves.values() for _, steps in runs), default=0)
    edges = np.linspace(0, max(total, 1), n_bins + 1)
    buf = io.StringIO()
    buf.write("# step " + " ".join(f"eta={eta:g}" for eta in etas) + "\n")
    table = np.full((n_bins, len(etas)), np.nan)
    for j, eta in enumerate(etas):
        per_seed = []
        for data, _ in curves[eta]:
            idx = np.clip(np.searchsorted(edges, data["step"], side="right") - 1, 0, n_bins - 1)
            sums = np.bincount(idx, data["mean_termination"], n_bins)
            counts = np.bincount(idx, minlength=n_bins)
            with np.errstate(invalid="ignore", divide="ignore"):
                per_seed.append(sums / counts)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            table[:, j] = np.nanmean(np.array(per_seed), axis=0)
    centres = 0.5 * (edges[1:] + edges[:-1])
    for c, row in zip(centres, table):
        buf.write(f"{c:.1f} " + " ".join("NaN" if np.isnan(v) else f"{v:.6f}" for v in row) + "\n")
    return buf.getvalue()


def load_trajectory(path) -> Trajectory:
    try:
        return Trajectory.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"cannot read trajectory {path}: {exc}") from None


def load_params(path) -> Theta:
    return Theta.from_dict(json.loads(Path(path).read_text())["theta"])
