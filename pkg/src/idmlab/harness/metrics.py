"""Evaluation metrics: argmax accuracy, rollout reward, predictive entropy, NLL."""

from __future__ import annotations

import numpy as np

from ..gridworld import Grid, Transition, step
from ..learning import action_probs, sample_actions
from ..models import Model


def _probs(policy, records, grid: Grid) -> np.ndarray:
    if hasattr(policy, "action_probs") and not isinstance(policy, Model):
        return policy.action_probs(records)
    if isinstance(policy, Model) and policy.spec.role == "idm":
        return policy.predict(policy.encode(records, grid))
    return action_probs(policy, records, grid)


def metric_accuracy(policy, test_set, grid: Grid) -> float:
    """Fraction of records whose label equals the argmax action.

    For an idm-role model the records' own next states are used, so this is
    the IDM's test accuracy.
    """
    records = list(test_set)
    if not records:
        raise ValueError("empty test set")
    p = _probs(policy, records, grid)
    y = np.array([t.a for t in records])
    return float((p.argmax(axis=1) == y).mean())


def metric_reward(policy, grid: Grid, episodes: int = 25, horizon: int = 38, rng: np.random.Generator | None = None) -> float:
    """Fraction of episodes reaching the goal within ``horizon`` sampled actions."""
    if rng is None:
        raise ValueError("reward rollouts need an rng")
    states = [grid.start] * episodes
    done = np.array([s == grid.goal for s in states])
    for _ in range(horizon):
        if done.all():
            break
        live = np.flatnonzero(~done)
        records = [Transition(states[i], None, states[i]) for i in live]
        actions = sample_actions(_probs(policy, records, grid), rng)
        for i, a in zip(live, actions):
            states[i] = step(grid, states[i], int(a))
            done[i] = states[i] == grid.goal
    return float(done.mean())


def metric_entropy(model, test_inputs, grid: Grid) -> float:
    """Mean Shannon entropy (nats) of the model's predictive distribution."""
    records = list(test_inputs)
    if not records:
        raise ValueError("empty test set")
    p = _probs(model, records, grid)
    q = np.where(p > 0, p, 1.0)
    return float(-(p * np.log(q)).sum(axis=1).mean())


def metric_nll(model, test_set, grid: Grid) -> float:
    records = list(test_set)
    if not records:
        raise ValueError("empty test set")
    p = _probs(model, records, grid)
    y = np.array([t.a for t in records])
    return float(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)).mean())
