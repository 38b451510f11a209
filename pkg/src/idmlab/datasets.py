"""Labeled/unlabeled dataset construction, splits, IDM relabeling and text I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gridworld import (
    DomainError,
    ExpertPolicy,
    Grid,
    Pos,
    Transition,
    ground_truth_vm,
    goal_conditioned_experts,
    make_open_grid,
    sample_trajectory,
    step,
    stochastic_diagonal_expert,
)

DATASET_FORMAT = "idmlab-transitions"
DATASET_VERSION = 1

__all__ = [
    "Transition",
    "DatasetSplit",
    "build_test_set",
    "build_goal_test_set",
    "build_trajectory_pool",
    "sample_train_split",
    "idm_relabel",
    "strip_labels",
    "save_transitions",
    "load_transitions",
]


@dataclass(frozen=True)
class DatasetSplit:
    labeled: tuple[Transition, ...]
    unlabeled: tuple[Transition, ...]
    split_fraction: float
    seed: int
    provenance: str = ""
    heldout: tuple[Transition, ...] = ()


def build_test_set(grid: Grid, expert: ExpertPolicy) -> list[Transition]:
    """One (s, pi*(s), v*(s)) record per feasible non-goal state."""
    vm = ground_truth_vm(expert)
    return [Transition(s, expert.table[s], vm(s)) for s in expert.table]


def build_goal_test_set(grid: Grid, goals: list[Pos]) -> list[Transition]:
    """Union over goals of the per-goal test sets, each record tagged with its goal."""
    out = []
    for g, expert in goal_conditioned_experts(grid, goals).items():
        vm = ground_truth_vm(expert)
        out.extend(Transition(s, a, vm(s), g) for s, a in expert.table.items())
    return out


def build_trajectory_pool(p_right: float, n: int = 20, n_traj: int = 26, horizon: int = 38, seed: int = 0) -> list[Transition]:
    """Stochastic-grid pool: ``n_traj`` expert rollouts of ``horizon`` actions."""
    grid = make_open_grid(n)
    expert = stochastic_diagonal_expert(grid, p_right)
    rng = np.random.default_rng(seed)
    pool = []
    for _ in range(n_traj):
        pool.extend(sample_trajectory(expert, horizon, rng))
    return pool


def strip_labels(records) -> tuple[Transition, ...]:
    return tuple(t.unlabeled() for t in records)


def sample_train_split(full, fraction: float, seed: int, protocol: str = "trajectory", provenance: str = "") -> DatasetSplit:
    """Draw ceil(fraction * N) labeled records without replacement.

    ``protocol="trajectory"``: the unlabeled set is the whole pool with labels
    removed. ``protocol="maze"``: the unlabeled set is the full state space
    (also label-free), matching evaluation on every feasible state.
    """
    full = list(full)
    if not full:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if protocol not in ("trajectory", "maze"):
        raise ValueError(f"unknown protocol {protocol!r}")
    n = len(full)
    k = min(n, math.ceil(round(fraction * n, 9)))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    chosen = set(idx.tolist())
    labeled = tuple(full[i] for i in idx)
    heldout = tuple(full[i] for i in range(n) if i not in chosen)
    return DatasetSplit(labeled, strip_labels(full), fraction, seed, provenance, heldout)


def idm_relabel(unlabeled, idm, grid: Grid, mode: str = "sample", rng: np.random.Generator | None = None) -> list[Transition]:
    """Attach an action from the IDM to every record; inputs are not modified.

    ``idm`` is either a trained :class:`~idmlab.models.Model` with the idm role
    or an exact table mapping (s, s') to an action distribution.
    """
    records = list(unlabeled)
    if not records:
        return []
    if isinstance(idm, dict):
        try:
            probs = np.stack([idm[(t.s, t.s_next)] for t in records])
        except KeyError as exc:
            raise DomainError(f"transition {exc.args[0]} not covered by the IDM table") from None
    else:
        if idm.spec.role != "idm":
            raise DomainError("relabeling needs a model with the idm role")
        probs = idm.predict(idm.encode(records, grid))
    if mode == "argmax":
        actions = probs.argmax(axis=1)
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        u = rng.random(len(records))
        cdf = np.cumsum(probs, axis=1)
        actions = np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)
    else:
        raise ValueError(f"unknown relabel mode {mode!r}")
    return [Transition(t.s, int(a), t.s_next, t.goal) for t, a in zip(records, actions)]


def check_transitions(grid: Grid, records) -> None:
    for t in records:
        if t.a is not None and step(grid, t.s, t.a) != t.s_next:
            raise DomainError(f"record {t} is inconsistent with the grid dynamics")


# text format ----------------------------------------------------------------

def _pos(p) -> str:
    return "-" if p is None else f"{p[0]},{p[1]}"


def _parse_pos(text: str):
    if text == "-":
        return None
    x, y = text.split(",")
    return (int(x), int(y))


def save_transitions(path, records, provenance: str = "") -> None:
    lines = [
        f"# format={DATASET_FORMAT} version={DATASET_VERSION}",
        f"# provenance={provenance}",
        "# s\ta\ts_next\tgoal",
    ]
    for t in records:
        a = "-" if t.a is None else str(t.a)
        lines.append(f"{_pos(t.s)}\t{a}\t{_pos(t.s_next)}\t{_pos(t.goal)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_transitions(path) -> tuple[list[Transition], str]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(f"# format={DATASET_FORMAT}"):
        raise ValueError(f"{path}: not an {DATASET_FORMAT} file")
    provenance = ""
    out = []
    for ln in lines:
        if ln.startswith("# provenance="):
            provenance = ln[len("# provenance="):]
        if not ln or ln.startswith("#"):
            continue
        s, a, s2, g = ln.split("\t")
        out.append(Transition(_parse_pos(s), None if a == "-" else int(a), _parse_pos(s2), _parse_pos(g)))
    return out, provenance
