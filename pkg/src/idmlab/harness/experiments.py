"""Expands an experiment config into jobs, runs them and writes CSV results."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import verifier
from ..datasets import build_goal_test_set, build_test_set, build_trajectory_pool, sample_train_split, strip_labels
from ..gridworld import (
    Transition,
    conditional_entropies,
    feasible_states,
    generate_maze,
    goal_conditioned_experts,
    ground_truth_vm,
    make_open_grid,
    solve_expert,
    state_visitation,
    step,
    stochastic_diagonal_expert,
)
from ..latent import LatentConfig, lapo_stage1, run_lapo, run_lapo_plus
from ..learning import TrainConfig, compose_vm_idm, default_config, train_bc, train_idm, train_idm_labeling
from ..models import ArchSpec
from .config import METHODS, ExperimentConfig, from_dict
from .metrics import metric_accuracy, metric_entropy, metric_nll, metric_reward

log = logging.getLogger(__name__)


@dataclass
class ResultRow:
    experiment: str
    env: str
    method: str
    arch: str
    split_fraction: float
    seed: int
    metric: str
    value: float
    epochs_run: int = 0
    wall_time: float | None = None


FIELDNAMES = [f.name for f in fields(ResultRow)]


# environments -------------------------------------------------------------------

@lru_cache(maxsize=None)
def _maze(size: int, maze_seed: int):
    grid = generate_maze(size, maze_seed)
    expert = solve_expert(grid)
    return grid, expert, build_test_set(grid, expert)


@lru_cache(maxsize=None)
def _goal_maze(size: int, maze_seed: int, n_goals: int):
    grid = generate_maze(size, maze_seed)
    cells = feasible_states(grid)
    if n_goals and n_goals < len(cells):
        rng = np.random.default_rng(maze_seed + 31337)
        goals = [cells[i] for i in sorted(rng.choice(len(cells), size=n_goals, replace=False))]
    else:
        goals = cells
    experts = goal_conditioned_experts(grid, goals)
    return grid, experts, build_goal_test_set(grid, goals)


@lru_cache(maxsize=None)
def _pool(p_right: float, n: int, n_traj: int, horizon: int, pool_seed: int):
    return tuple(build_trajectory_pool(p_right, n, n_traj, horizon, pool_seed))


def _train_config(cfg: ExperimentConfig, kind: str, seed: int, **kw) -> TrainConfig:
    return default_config(kind, seed=seed, max_epochs=cfg.max_epochs, early_stop_loss=cfg.early_stop_loss, eval_every=cfg.eval_every, **kw)


# job runners --------------------------------------------------------------------

def _maze_job(cfg: ExperimentConfig, job: dict) -> list[ResultRow]:
    size, method, split, seed = job["size"], job["method"], job["split"], job["seed"]
    algo, kind, goal_cond = METHODS[cfg.experiment][method]
    fmt = "img" if kind.startswith("CNN") else "pos"
    if cfg.experiment == "goal":
        grid, experts, test = _goal_maze(size, cfg.maze_seed, cfg.n_goals)

        def vm(s, g):
            return step(grid, s, experts[g].table[s])

        env = f"maze{size}_goals{len(experts)}"
    else:
        grid, expert, test = _maze(size, cfg.maze_seed)
        vm = ground_truth_vm(expert)
        env = f"maze{size}"
    split_data = sample_train_split(test, split, seed, protocol="maze", provenance=env)
    tc = _train_config(cfg, kind, seed)
    goal_vm = cfg.experiment == "goal"

    def as_policy(model):
        return model if algo == "bc" else compose_vm_idm(vm, model, grid, goal_conditioned_vm=goal_vm)

    def evaluate(model):
        return {"acc": metric_accuracy(as_policy(model), test, grid)}

    role = "policy" if algo == "bc" else "idm"
    spec = ArchSpec(kind, role, fmt, goal_cond)
    trainer = train_bc if algo == "bc" else train_idm
    res = trainer(split_data.labeled, spec, tc, grid, evaluate=evaluate if cfg.eval_every else None)
    policy = as_policy(res.model)
    rows = [
        ("test_accuracy", metric_accuracy(policy, test, grid)),
        ("train_accuracy", metric_accuracy(policy, split_data.labeled, grid)),
        ("train_loss", res.final_loss),
    ]
    if split_data.heldout:
        rows.append(("heldout_accuracy", metric_accuracy(policy, split_data.heldout, grid)))
    evals = [h["acc"] for h in res.history if "acc" in h]
    if evals:
        rows.append(("test_accuracy_best", max(evals)))
    return [ResultRow(cfg.experiment, env, method, kind, split, seed, m, float(v), res.epochs_run) for m, v in rows]


def _stochastic_job(cfg: ExperimentConfig, job: dict) -> list[ResultRow]:
    p, method, split, seed = job["p_right"], job["method"], job["split"], job["seed"]
    algo, kind, _ = METHODS[cfg.experiment][method]
    grid = make_open_grid(cfg.grid_size)
    pool = _pool(p, cfg.grid_size, cfg.n_trajectories, cfg.horizon, cfg.pool_seed)
    split_data = sample_train_split(pool, split, seed, protocol="trajectory")
    tc = _train_config(cfg, kind, seed, batch_rule="min512")
    env = f"grid{cfg.grid_size}_p{p:g}"
    if algo == "bc":
        res = train_bc(split_data.labeled, ArchSpec(kind), tc, grid)
        policy, epochs = res.model, res.epochs_run
    else:
        lab = train_idm_labeling(
            split_data.labeled, split_data.unlabeled, ArchSpec(kind, "idm"), ArchSpec(kind), tc, grid,
            mode=cfg.relabel_mode,
        )
        policy, epochs = lab.policy, lab.policy_result.epochs_run
    rng = np.random.default_rng([seed, 2024])
    reward = metric_reward(policy, grid, cfg.episodes, cfg.horizon, rng)
    return [ResultRow(cfg.experiment, env, method, kind, split, seed, "avg_reward", reward, epochs)]


def entropy_test_set(cfg: ExperimentConfig, p: float) -> list[Transition]:
    """Fresh expert rollouts (independent of the training pool) for entropy estimates."""
    return build_trajectory_pool(p, cfg.grid_size, cfg.n_trajectories, cfg.horizon, cfg.pool_seed + 1_000_003)


def _entropy_job(cfg: ExperimentConfig, job: dict) -> list[ResultRow]:
    p, method, split, seed = job["p_right"], job["method"], job["split"], job["seed"]
    algo, kind, _ = METHODS[cfg.experiment][method]
    grid = make_open_grid(cfg.grid_size)
    pool = _pool(p, cfg.grid_size, cfg.n_trajectories, cfg.horizon, cfg.pool_seed)
    split_data = sample_train_split(pool, split, seed, protocol="trajectory")
    tc = _train_config(cfg, kind, seed, batch_rule="min512")
    test = entropy_test_set(cfg, p)
    env = f"grid{cfg.grid_size}_p{p:g}"
    if algo == "bc":
        res = train_bc(split_data.labeled, ArchSpec(kind), tc, grid)
    else:
        res = train_idm(split_data.labeled, ArchSpec(kind, "idm"), tc, grid)
    rows = [
        ("entropy", metric_entropy(res.model, test, grid)),
        ("test_nll", metric_nll(res.model, test, grid)),
    ]
    return [ResultRow(cfg.experiment, env, method, kind, split, seed, m, v, res.epochs_run) for m, v in rows]


def exact_entropy_rows(cfg: ExperimentConfig, p: float) -> list[ResultRow]:
    grid = make_open_grid(cfg.grid_size)
    expert = stochastic_diagonal_expert(grid, p)
    weights = state_visitation(expert, cfg.horizon)
    h_as, h_ass = conditional_entropies(expert, weights)
    env = f"grid{cfg.grid_size}_p{p:g}"
    return [
        ResultRow(cfg.experiment, env, "exact", "-", 1.0, 0, "H_a_given_s", float(h_as)),
        ResultRow(cfg.experiment, env, "exact", "-", 1.0, 0, "H_a_given_ss", float(h_ass)),
    ]


def _latent_config(cfg: ExperimentConfig, seed: int) -> LatentConfig:
    kw = dict(cfg.latent)
    if "stage_steps" in kw:
        kw["stage_steps"] = tuple(kw["stage_steps"])
    if "decoder_hidden" in kw:
        kw["decoder_hidden"] = tuple(kw["decoder_hidden"])
    return LatentConfig(seed=seed, **kw)


def _lapo_job(cfg: ExperimentConfig, job: dict) -> list[ResultRow]:
    size, seed = job["size"], job["seed"]
    grid, expert, test = _maze(size, cfg.maze_seed)
    env = f"maze{size}_img"
    rng = np.random.default_rng([seed, 77])
    n_l = min(cfg.labeled_count, len(test))
    labeled = [test[i] for i in sorted(rng.choice(len(test), size=n_l, replace=False))]
    unlabeled = strip_labels(test)
    lcfg = _latent_config(cfg, seed)
    base = lapo_stage1(unlabeled, grid, lcfg)
    rows = []
    frac = n_l / len(test)
    for method in cfg.methods:
        stack = copy.deepcopy(base)
        if method == "LAPO":
            policy, _ = run_lapo(unlabeled, labeled, grid, lcfg, stack=stack)
        else:
            policy, _ = run_lapo_plus(unlabeled, labeled, grid, lcfg, stack=stack)
        rows.append(ResultRow(cfg.experiment, env, method, "latent", frac, seed, "test_accuracy", metric_accuracy(policy, test, grid), sum(lcfg.stage_steps)))
    initial = base.history["stage1_initial_recon"]
    final = base.history["stage1_recon"][-1]
    rows.append(ResultRow(cfg.experiment, env, "stage1", "latent", frac, seed, "recon_initial", initial, lcfg.stage_steps[0]))
    rows.append(ResultRow(cfg.experiment, env, "stage1", "latent", frac, seed, "recon_final", final, lcfg.stage_steps[0]))
    return rows


def _verify_job(cfg: ExperimentConfig, job: dict) -> list[ResultRow]:
    seed = job["seed"]
    trials = verifier.run_trials(cfg.trials, seed=seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"verify_report_seed{seed}.jsonl").write_text(verifier.format_report(trials))
    stats = {
        "max_kl_residual": max(t.kl_residual for t in trials),
        "max_compose_residual": max(t.compose_residual for t in trials),
        "max_equivalence_residual": max(t.equivalence_residual for t in trials),
        "inequality_failures": float(sum(not t.inequality_holds for t in trials)),
        "failures": float(sum(not t.passed() for t in trials)),
        "trials": float(len(trials)),
    }
    return [ResultRow(cfg.experiment, "tabular", "tabular", "-", 1.0, seed, k, v) for k, v in stats.items()]


# orchestration ------------------------------------------------------------------

def expand_jobs(cfg: ExperimentConfig, seed_offset: int = 0) -> list[dict]:
    seeds = [s + seed_offset for s in cfg.seeds]
    exp = cfg.experiment
    jobs = []
    if exp in ("complexity_pos", "complexity_img", "goal"):
        sizes = cfg.sizes if exp != "goal" else cfg.sizes[:1]
        for size in sizes:
            for method in cfg.methods:
                for split in cfg.splits:
                    for seed in seeds:
                        jobs.append(dict(kind="maze", size=size, method=method, split=split, seed=seed))
    elif exp in ("stochasticity", "entropy_gap"):
        kind = "stochastic" if exp == "stochasticity" else "entropy"
        for p in cfg.p_right:
            for method in cfg.methods:
                for split in cfg.splits:
                    for seed in seeds:
                        jobs.append(dict(kind=kind, p_right=p, method=method, split=split, seed=seed))
    elif exp == "lapo_compare":
        for size in cfg.sizes:
            for seed in seeds:
                jobs.append(dict(kind="lapo", size=size, seed=seed))
    else:
        for seed in seeds:
            jobs.append(dict(kind="verify", seed=seed))
    return jobs


_RUNNERS = {
    "maze": _maze_job,
    "stochastic": _stochastic_job,
    "entropy": _entropy_job,
    "lapo": _lapo_job,
    "verify": _verify_job,
}


def run_job(cfg_dict: dict, job: dict) -> list[ResultRow]:
    cfg = from_dict(cfg_dict)
    t0 = time.perf_counter()
    rows = _RUNNERS[job["kind"]](cfg, job)
    if cfg.record_time:
        elapsed = time.perf_counter() - t0
        for r in rows:
            r.wall_time = elapsed
    return rows


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, seed_offset: int = 0, write: bool = True) -> list[ResultRow]:
    """Run the full method x split x seed grid of ``cfg``; write results.csv and summary.csv."""
    job_list = expand_jobs(cfg, seed_offset)
    cfg_dict = cfg.to_dict()
    log.info("%s: %d jobs", cfg.experiment, len(job_list))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run_job, [cfg_dict] * len(job_list), job_list))
    else:
        chunks = [run_job(cfg_dict, j) for j in job_list]
    rows = [r for chunk in chunks for r in chunk]
    if cfg.experiment == "entropy_gap":
        for p in cfg.p_right:
            rows.extend(exact_entropy_rows(cfg, p))
    for r in rows:
        if not math.isfinite(r.value):
            raise ValueError(f"non-finite metric in {r}")
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(rows_to_csv(rows))
        (out / "summary.csv").write_text(summary_to_csv(aggregate(rows)))
    return rows


# CSV ----------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDNAMES)
    for r in rows:
        w.writerow([_fmt(v) for v in asdict(r).values()])
    return buf.getvalue()


def read_rows(path) -> list[ResultRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(FIELDNAMES) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for d in reader:
            out.append(ResultRow(
                d["experiment"], d["env"], d["method"], d["arch"], float(d["split_fraction"]), int(d["seed"]),
                d["metric"], float(d["value"]), int(d["epochs_run"]), float(d["wall_time"]) if d["wall_time"] else None,
            ))
        return out


SUMMARY_FIELDS = ["experiment", "env", "method", "arch", "split_fraction", "metric", "n", "mean", "std"]


def aggregate(rows: list[ResultRow]) -> list[dict]:
    """Mean and population std over seeds for every (env, method, split, metric) cell."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r.experiment, r.env, r.method, r.arch, r.split_fraction, r.metric)
        groups.setdefault(key, []).append(r.value)
    out = []
    for key, vals in groups.items():
        arr = np.array(vals)
        out.append(dict(zip(SUMMARY_FIELDS, [*key, len(vals), float(arr.mean()), float(arr.std())])))
    return out


def summary_to_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    for d in summary:
        w.writerow({k: _fmt(v) for k, v in d.items()})
    return buf.getvalue()
