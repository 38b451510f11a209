import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idmlab.datasets import (
    build_goal_test_set,
    build_test_set,
    build_trajectory_pool,
    check_transitions,
    idm_relabel,
    load_transitions,
    sample_train_split,
    save_transitions,
    strip_labels,
)
from idmlab.gridworld import DomainError, Transition, feasible_states, generate_maze, ground_truth_idm_table, make_open_grid, solve_expert, stochastic_diagonal_expert
from idmlab.models import ArchSpec, analytic_idm_pos, build


@pytest.fixture(scope="module")
def maze():
    g = generate_maze(20, 0)
    return g, build_test_set(g, solve_expert(g))


@pytest.mark.parametrize("size,n", [(10, 30), (20, 160), (50, 1150)])
def test_test_set_size(size, n):
    g = generate_maze(size, 1)
    test = build_test_set(g, solve_expert(g))
    assert len(test) == n
    check_transitions(g, test)


def test_goal_test_set_tags_goals():
    g = generate_maze(10, 0)
    goals = feasible_states(g)[:3]
    test = build_goal_test_set(g, goals)
    assert len(test) == 3 * 30
    assert {t.goal for t in test} == set(goals)


def test_trajectory_pool_shape_and_seed():
    pool = build_trajectory_pool(0.5)
    assert len(pool) == 26 * 38 == 988
    assert pool == build_trajectory_pool(0.5)
    assert pool != build_trajectory_pool(0.5, seed=1)
    check_transitions(make_open_grid(20), pool)


@settings(max_examples=30, deadline=None, derandomize=True)
@given(st.floats(0.01, 1.0), st.integers(0, 1000))
def test_split_sizes_and_disjointness(fraction, seed):
    pool = build_trajectory_pool(0.7)
    sp = sample_train_split(pool, fraction, seed)
    assert len(sp.labeled) == min(len(pool), math.ceil(round(fraction * len(pool), 9)))
    assert len(sp.labeled) + len(sp.heldout) == len(pool)
    assert len(sp.unlabeled) == len(pool)
    assert all(t.a is None for t in sp.unlabeled)
    assert sp == sample_train_split(pool, fraction, seed)


def test_split_protocols_and_errors(maze):
    _, test = maze
    sp = sample_train_split(test, 0.1, 3, protocol="maze")
    assert len(sp.labeled) == 16
    with pytest.raises(ValueError):
        sample_train_split(test, 0.0, 0)
    with pytest.raises(ValueError):
        sample_train_split([], 0.5, 0)
    with pytest.raises(ValueError):
        sample_train_split(test, 0.5, 0, protocol="other")


def test_relabel_with_exact_table_recovers_deterministic_labels():
    g = make_open_grid(20)
    e = stochastic_diagonal_expert(g, 0.5)
    pool = build_trajectory_pool(0.5)
    table = ground_truth_idm_table(e)
    relabeled = idm_relabel(strip_labels(pool), table, g, mode="sample", rng=np.random.default_rng(0))
    assert [t.a for t in relabeled] == [t.a for t in pool]


def test_relabel_with_analytic_model(maze):
    g, test = maze
    relabeled = idm_relabel(strip_labels(test), analytic_idm_pos(), g, mode="argmax")
    assert [t.a for t in relabeled] == [t.a for t in test]


def test_relabel_errors(maze):
    g, test = maze
    with pytest.raises(DomainError):
        idm_relabel(strip_labels(test), build(ArchSpec("LC")), g, mode="argmax")
    with pytest.raises(ValueError):
        idm_relabel(strip_labels(test), analytic_idm_pos(), g, mode="sample")
    with pytest.raises(DomainError):
        idm_relabel([Transition((0, 0), None, (5, 5))], {}, g, mode="argmax")


def test_check_transitions_rejects_inconsistent(maze):
    g, test = maze
    bad = Transition(test[0].s, (test[0].a + 1) % 4, test[0].s_next)
    with pytest.raises(DomainError):
        check_transitions(g, [bad])


def test_text_round_trip(tmp_path):
    g = generate_maze(10, 0)
    recs = build_goal_test_set(g, feasible_states(g)[:2]) + list(strip_labels(build_trajectory_pool(0.5)[:5]))
    path = tmp_path / "d.tsv"
    save_transitions(path, recs, provenance="unit")
    loaded, prov = load_transitions(path)
    assert loaded == recs and prov == "unit"
    path.write_text("garbage\n")
    with pytest.raises(ValueError):
        load_transitions(path)
