import numpy as np
import pytest

from idmlab.datasets import build_test_set
from idmlab.gridworld import DomainError, Transition, generate_maze, make_open_grid, render_img, solve_expert
from idmlab.harness.metrics import metric_accuracy
from idmlab.models import ArchSpec, ConfigError, Model, analytic_idm_img, analytic_idm_pos, build, motion_scores


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind="LC", state_format="img"),
        dict(kind="CNN1", state_format="pos"),
        dict(kind="CNN5", state_format="img", goal_conditioned=True),
        dict(kind="RNN"),
        dict(kind="LC", role="critic"),
    ],
)
def test_invalid_arch_pairings(kwargs):
    with pytest.raises(ConfigError):
        ArchSpec(**kwargs)


def test_parameter_counts():
    assert build(ArchSpec("LC")).n_params() == 2 * 4 + 4
    assert build(ArchSpec("LC", "idm")).n_params() == 4 * 4 + 4
    assert build(ArchSpec("MLP5")).n_params() == (2 * 100 + 100) + 4 * (100 * 100 + 100) + (100 * 4 + 4)
    assert build(ArchSpec("CNN1", "idm", "img")).n_params() == 4 * 6 * 9 + 4
    with pytest.raises(ConfigError):
        build(ArchSpec("CNN5", state_format="img"))


def test_encode_shapes():
    g = generate_maze(10, 0)
    recs = [Transition((1, 1), 2, (1, 2), (7, 7))]
    assert build(ArchSpec("MLP5", "idm", goal_conditioned=True)).encode(recs, g).tolist() == [[1, 1, 1, 2, 7, 7]]
    x = build(ArchSpec("CNN5", "idm", "img"), image_shape=(10, 10)).encode(recs, g)
    assert x.shape == (1, 6, 10, 10)
    with pytest.raises(DomainError):
        build(ArchSpec("MLP5", goal_conditioned=True)).encode([Transition((1, 1), 2, (1, 2))], g)
    with pytest.raises(DomainError):
        build(ArchSpec("CNN5", state_format="img"), image_shape=(20, 20)).encode(recs, g)


@pytest.mark.parametrize("kind,fmt", [("LC", "pos"), ("MLP5", "pos"), ("CNN1", "img"), ("CNN5", "img")])
def test_forward_is_distribution(kind, fmt):
    g = generate_maze(10, 0)
    m = build(ArchSpec(kind, "idm", fmt), seed=1, image_shape=(10, 10))
    test = build_test_set(g, solve_expert(g))
    p = m.predict(m.encode(test, g))
    assert p.shape == (30, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    m = build(ArchSpec("MLP5", "idm", goal_conditioned=True), seed=3)
    m.save(tmp_path / "m.json")
    m2 = Model.from_checkpoint(tmp_path / "m.json")
    assert m2.spec == m.spec
    x = np.random.default_rng(0).normal(size=(5, 6))
    np.testing.assert_array_equal(m.predict(x), m2.predict(x))


def test_build_is_seeded():
    a, b = build(ArchSpec("MLP5"), seed=4), build(ArchSpec("MLP5"), seed=4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


@pytest.mark.parametrize("size", [10, 20, 50])
def test_analytic_idms_exact(size):
    g = generate_maze(size, 2)
    test = build_test_set(g, solve_expert(g))
    assert metric_accuracy(analytic_idm_pos(), test, g) == 1.0
    assert metric_accuracy(analytic_idm_img(g), test, g) == 1.0


def test_motion_scores_pick_the_move():
    g = make_open_grid(5)
    for a, nxt in enumerate([(3, 2), (1, 2), (2, 3), (2, 1)]):
        x = np.concatenate([render_img(g, (2, 2)), render_img(g, nxt)])[None]
        s = motion_scores(x)[0]
        assert s.argmax() == a and s[a] == 2.0
