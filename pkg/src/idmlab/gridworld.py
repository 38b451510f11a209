"""Grid and maze environments, experts, rendering and ground-truth oracles.

Coordinates are (x, y) with y increasing upward. Arrays indexed by cell are
laid out ``[y, x]``. Actions are ordered (right, left, up, down).
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

RIGHT, LEFT, UP, DOWN = 0, 1, 2, 3
ACTION_NAMES = ("right", "left", "up", "down")
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))
N_ACTIONS = 4
MAZE_SIZES = (10, 20, 50)

Pos = tuple[int, int]


class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    width: int
    height: int
    walls: np.ndarray  # bool [height, width]
    start: Pos
    goal: Pos
    seed: int = 0

    def __post_init__(self):
        self.walls.setflags(write=False)
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.is_free(cell):
                raise DomainError(f"{name} {cell} is not a free cell")

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and (self.width, self.height, self.start, self.goal) == (other.width, other.height, other.start, other.goal)
            and np.array_equal(self.walls, other.walls)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.start, self.goal, self.walls.tobytes()))

    def in_bounds(self, cell: Pos) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, cell: Pos) -> bool:
        return self.in_bounds(cell) and not self.walls[cell[1], cell[0]]

    def with_goal(self, goal: Pos) -> Grid:
        return Grid(self.width, self.height, self.walls, self.start, tuple(goal), self.seed)

    def free_cells(self) -> list[Pos]:
        ys, xs = np.nonzero(~self.walls)
        return sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))

    def to_text(self) -> str:
        """``#`` wall, ``.`` free, ``S`` start, ``G`` goal; top line is the highest y."""
        rows = []
        for y in range(self.height - 1, -1, -1):
            row = []
            for x in range(self.width):
                if (x, y) == self.goal:
                    row.append("G")
                elif (x, y) == self.start:
                    row.append("S")
                else:
                    row.append("#" if self.walls[y, x] else ".")
            rows.append("".join(row))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str, seed: int = 0) -> Grid:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        height, width = len(lines), len(lines[0])
        walls = np.zeros((height, width), dtype=bool)
        start = goal = None
        for row, line in enumerate(lines):
            if len(line) != width:
                raise DomainError("ragged map text")
            y = height - 1 - row
            for x, ch in enumerate(line):
                if ch == "#":
                    walls[y, x] = True
                elif ch == "S":
                    start = (x, y)
                elif ch == "G":
                    goal = (x, y)
                elif ch != ".":
                    raise DomainError(f"unknown map character {ch!r}")
        if start is None or goal is None:
            raise DomainError("map needs one S and one G")
        return cls(width, height, walls, start, goal, seed)


# dynamics -------------------------------------------------------------------

def step(grid: Grid, s: Pos, a: int) -> Pos:
    if not grid.is_free(s):
        raise DomainError(f"state {s} is not a free cell")
    dx, dy = DIRECTIONS[a]
    nxt = (s[0] + dx, s[1] + dy)
    return nxt if grid.is_free(nxt) else s


def bfs_distances(grid: Grid, source: Pos) -> dict[Pos, int]:
    """Shortest-path distances from ``source``; moves are reversible so this is also distance-to-source."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        c = queue.popleft()
        for a in range(N_ACTIONS):
            n = step(grid, c, a)
            if n not in dist:
                dist[n] = dist[c] + 1
                queue.append(n)
    return dist


def feasible_states(grid: Grid) -> list[Pos]:
    """Free cells reachable from the start, in (y, x) order."""
    reach = bfs_distances(grid, grid.start)
    return [c for c in grid.free_cells() if c in reach]


# maze generation ------------------------------------------------------------

def generate_maze(size: int, seed: int) -> Grid:
    """Perfect maze from a recursive backtracker, walled on every border.

    The maze is carved on the largest odd lattice that fits in ``size`` (cells
    at odd coordinates); an even ``size`` leaves one extra wall row and column.
    Start is the lower-left cell, goal the upper-right one.
    """
    if size not in MAZE_SIZES:
        raise DomainError(f"maze size must be one of {MAZE_SIZES}")
    lattice = size if size % 2 else size - 1
    n = (lattice - 1) // 2
    rng = random.Random(seed)
    walls = np.ones((size, size), dtype=bool)
    visited = np.zeros((n, n), dtype=bool)
    stack = [(0, 0)]
    visited[0, 0] = True
    walls[1, 1] = False
    while stack:
        cx, cy = stack[-1]
        options = [
            (cx + dx, cy + dy)
            for dx, dy in DIRECTIONS
            if 0 <= cx + dx < n and 0 <= cy + dy < n and not visited[cy + dy, cx + dx]
        ]
        if not options:
            stack.pop()
            continue
        nx, ny = rng.choice(options)
        visited[ny, nx] = True
        walls[2 * ny + 1, 2 * nx + 1] = False
        walls[cy + ny + 1, cx + nx + 1] = False
        stack.append((nx, ny))
    return Grid(size, size, walls, start=(1, 1), goal=(2 * n - 1, 2 * n - 1), seed=seed)


def make_open_grid(n: int = 20) -> Grid:
    """Obstacle-free n x n grid, start top-left, goal bottom-right."""
    return Grid(n, n, np.zeros((n, n), dtype=bool), start=(0, n - 1), goal=(n - 1, 0))


# experts --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExpertPolicy:
    """Either a deterministic action table or the diagonal coin-flip expert."""

    grid: Grid
    kind: str  # "deterministic" | "stochastic_diagonal"
    table: dict[Pos, int] = field(default_factory=dict)
    p_right: float = 1.0

    @property
    def deterministic(self) -> bool:
        return self.kind == "deterministic"

    def probs(self, s: Pos) -> np.ndarray:
        p = np.zeros(N_ACTIONS)
        if self.deterministic:
            p[self.table[s]] = 1.0
            return p
        gx, gy = self.grid.goal
        if s[0] == gx:
            p[DOWN] = 1.0
        elif s[1] == gy:
            p[RIGHT] = 1.0
        else:
            p[RIGHT], p[DOWN] = self.p_right, 1.0 - self.p_right
        return p

    def act(self, s: Pos, rng: np.random.Generator | None = None) -> int:
        if self.deterministic:
            return self.table[s]
        p = self.probs(s)
        return int(rng.choice(N_ACTIONS, p=p))

    def states(self) -> list[Pos]:
        if self.deterministic:
            return list(self.table)
        return [c for c in self.grid.free_cells() if c != self.grid.goal]


def solve_expert(grid: Grid) -> ExpertPolicy:
    """First move of a shortest path to the goal, ties broken by action order."""
    dist = bfs_distances(grid, grid.goal)
    table = {}
    for s in feasible_states(grid):
        if s == grid.goal or s not in dist:
            continue
        best = min(range(N_ACTIONS), key=lambda a: (dist.get(step(grid, s, a), math.inf), a))
        table[s] = best
    return ExpertPolicy(grid, "deterministic", table)


def stochastic_diagonal_expert(grid: Grid, p_right: float) -> ExpertPolicy:
    if not 0.0 <= p_right <= 1.0:
        raise DomainError("p_right must lie in [0, 1]")
    gx, gy = grid.goal
    sx, sy = grid.start
    if gx < sx or gy > sy:
        raise DomainError("diagonal expert needs the goal right of and below the start")
    return ExpertPolicy(grid, "stochastic_diagonal", p_right=float(p_right))


def ground_truth_vm(expert: ExpertPolicy) -> Callable[[Pos], Pos]:
    if not expert.deterministic:
        raise DomainError("ground-truth VM as a function needs a deterministic expert")
    grid, table = expert.grid, expert.table

    def vm(s: Pos) -> Pos:
        return step(grid, s, table[s])

    return vm


def goal_conditioned_experts(grid: Grid, goals: list[Pos]) -> dict[Pos, ExpertPolicy]:
    return {tuple(g): solve_expert(grid.with_goal(g)) for g in goals}


# rendering ------------------------------------------------------------------

def render_img(grid: Grid, s: Pos, goal: Pos | None = None) -> np.ndarray:
    """[3, H, W]: walls, one-hot player, one-hot goal."""
    if not grid.is_free(s):
        raise DomainError(f"cannot render infeasible state {s}")
    g = grid.goal if goal is None else goal
    img = np.zeros((3, grid.height, grid.width))
    img[0] = grid.walls
    img[1, s[1], s[0]] = 1.0
    img[2, g[1], g[0]] = 1.0
    return img


# trajectories ---------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    s: Pos
    a: int | None
    s_next: Pos
    goal: Pos | None = None

    def unlabeled(self) -> Transition:
        return Transition(self.s, None, self.s_next, self.goal)


def sample_trajectory(expert: ExpertPolicy, horizon: int, rng: np.random.Generator) -> list[Transition]:
    """Roll the expert from the start for ``horizon`` actions (stopping at the goal)."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    grid = expert.grid
    s = grid.start
    out = []
    for _ in range(horizon):
        if s == grid.goal:
            break
        a = expert.act(s, rng)
        s2 = step(grid, s, a)
        out.append(Transition(s, a, s2))
        s = s2
    return out


# exact tables ---------------------------------------------------------------

def state_visitation(expert: ExpertPolicy, horizon: int) -> dict[Pos, float]:
    """Average over t=1..T of the exact state marginal when rolling the expert.

    The goal is absorbing and excluded, so the weights only cover states where
    an action is taken; they are renormalised to sum to one.
    """
    grid = expert.grid
    current = {grid.start: 1.0}
    totals: dict[Pos, float] = {}
    for _ in range(horizon):
        nxt: dict[Pos, float] = {}
        for s, w in current.items():
            if s == grid.goal:
                continue
            totals[s] = totals.get(s, 0.0) + w
            for a, pa in enumerate(expert.probs(s)):
                if pa > 0:
                    s2 = step(grid, s, a)
                    nxt[s2] = nxt.get(s2, 0.0) + w * pa
        current = nxt
    z = sum(totals.values())
    return {s: w / z for s, w in totals.items()}


def transition_table(expert: ExpertPolicy, weights: dict[Pos, float] | None = None) -> dict[tuple[Pos, int, Pos], float]:
    """p(s, a, s') = p(s) pi(a|s) 1[s' = f(s, a)]; uniform p(s) over expert states by default."""
    states = expert.states()
    if weights is None:
        weights = {s: 1.0 / len(states) for s in states}
    table: dict[tuple[Pos, int, Pos], float] = {}
    for s, w in weights.items():
        for a, pa in enumerate(expert.probs(s)):
            if pa > 0 and w > 0:
                key = (s, a, step(expert.grid, s, a))
                table[key] = table.get(key, 0.0) + w * pa
    return table


def ground_truth_idm_table(expert: ExpertPolicy, weights: dict[Pos, float] | None = None) -> dict[tuple[Pos, Pos], np.ndarray]:
    """h*(a | s, s') for every (s, s') pair with positive probability."""
    joint = transition_table(expert, weights)
    out: dict[tuple[Pos, Pos], np.ndarray] = {}
    for (s, a, s2), p in joint.items():
        out.setdefault((s, s2), np.zeros(N_ACTIONS))[a] += p
    return {k: v / v.sum() for k, v in out.items()}


def _entropy(p: np.ndarray) -> float:
    q = p[p > 0]
    return float(-(q * np.log(q)).sum())


def conditional_entropies(expert: ExpertPolicy, weights: dict[Pos, float] | None = None) -> tuple[float, float]:
    """Exact (H(a|s), H(a|s,s')) in nats under p(s) = ``weights``."""
    states = expert.states()
    if weights is None:
        weights = {s: 1.0 / len(states) for s in states}
    h_as = sum(w * _entropy(expert.probs(s)) for s, w in weights.items())
    joint = transition_table(expert, weights)
    pair_mass: dict[tuple[Pos, Pos], float] = {}
    for (s, _, s2), p in joint.items():
        pair_mass[(s, s2)] = pair_mass.get((s, s2), 0.0) + p
    idm = ground_truth_idm_table(expert, weights)
    h_ass = sum(m * _entropy(idm[k]) for k, m in pair_mass.items())
    return h_as, h_ass
