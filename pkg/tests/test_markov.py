import numpy as np
import pytest

from fuelexec.markov import (
    MarkovModel, StateGrid, TimeGrid, build_one_state, build_random_walk, build_two_state, semigroup_expect,
    stationary_distribution, uniform_states,
)


def test_time_grid_nodes_end_exactly_at_T():
    tg = TimeGrid(0.0, 0.3, 7)
    assert tg.nodes[-1] == 0.3
    assert tg.remaining[-1] == 0.0
    assert np.isclose(tg.dt, 0.3 / 7)


@pytest.mark.parametrize("args", [(0.0, 1.0, 1), (1.0, 1.0, 5), (0.0, 1.0, 2.5)])
def test_time_grid_rejects_bad_input(args):
    with pytest.raises(ValueError):
        TimeGrid(*args)


def test_index_of_rejects_off_grid_time():
    tg = TimeGrid(0.0, 1.0, 10)
    assert tg.index_of(0.3) == 3
    with pytest.raises(ValueError):
        tg.index_of(0.35)


def test_state_labels_unique():
    with pytest.raises(ValueError):
        StateGrid((0, 1, 0))


def test_kernel_rows_must_sum_to_one():
    tg = TimeGrid(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        MarkovModel(tg, StateGrid((0, 1)), np.array([[0.5, 0.4], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        MarkovModel(tg, StateGrid((0, 1)), np.array([[1.1, -0.1], [0.0, 1.0]]))


def test_semigroup_identity_and_constants():
    model = build_two_state(1.0, 2.0, TimeGrid(0.0, 1.0, 10))
    f = np.array([3.0, -1.0])
    assert np.array_equal(semigroup_expect(model, 4, 4, f), f)
    assert np.allclose(semigroup_expect(model, 0, 10, np.ones(2)), 1.0, atol=1e-14)


def test_semigroup_one_step_by_hand():
    tg = TimeGrid(0.0, 1.0, 10)
    model = MarkovModel(tg, StateGrid((0, 1)), np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert np.allclose(semigroup_expect(model, 0, 1, [1.0, 0.0]), [0.9, 0.2])


def test_semigroup_index_errors():
    model = build_one_state(TimeGrid(0.0, 1.0, 4))
    with pytest.raises(IndexError):
        semigroup_expect(model, 3, 2, [1.0])
    with pytest.raises(IndexError):
        semigroup_expect(model, 0, 5, [1.0])


def test_chapman_kolmogorov_on_time_dependent_kernel():
    rng = np.random.default_rng(0)
    tg = TimeGrid(0.0, 1.0, 6)
    K = rng.random((6, 3, 3))
    K /= K.sum(axis=2, keepdims=True)
    model = MarkovModel(tg, StateGrid(("a", "b", "c")), K)
    f = rng.random(3)
    direct = semigroup_expect(model, 1, 5, f)
    split = semigroup_expect(model, 1, 3, semigroup_expect(model, 3, 5, f))
    assert np.allclose(direct, split, rtol=1e-14)


def test_two_state_builder():
    tg = TimeGrid(0.0, 1.0, 10)
    assert np.array_equal(build_two_state(0.0, 0.0, tg).kernel, np.eye(2))
    P = build_two_state(1.0, 2.0, tg).kernel
    assert np.allclose(P[0], [0.9, 0.1])
    assert np.allclose(stationary_distribution(P), [2 / 3, 1 / 3])
    with pytest.raises(ValueError):
        build_two_state(20.0, 1.0, tg)


def test_random_walk_probabilities():
    tg = TimeGrid(0.0, 0.1, 10)  # dt = 0.01
    states = uniform_states(-1.0, 1.0, 11)  # dz = 0.2
    P = build_random_walk(1.0, states, tg).kernel
    assert np.isclose(P[5, 4], 0.125) and np.isclose(P[5, 6], 0.125) and np.isclose(P[5, 5], 0.75)
    assert np.array_equal(build_random_walk(0.0, states, tg).kernel, np.eye(11))
    with pytest.raises(ValueError):
        build_random_walk(10.0, states, tg)


def test_random_walk_is_martingale_away_from_boundary():
    tg = TimeGrid(0.0, 0.2, 20)
    states = uniform_states(-5.0, 5.0, 101)
    model = build_random_walk(1.0, states, tg)
    z = states.coordinates()
    e = semigroup_expect(model, 0, 20, z)
    mid = slice(30, 71)
    assert np.allclose(e[mid], z[mid], atol=1e-12)


def test_absorbing_boundary_edges_are_fixed():
    tg = TimeGrid(0.0, 0.1, 10)
    P = build_random_walk(1.0, uniform_states(0.0, 1.0, 6), tg, boundary="absorb").kernel
    assert P[0, 0] == 1.0 and P[-1, -1] == 1.0


def test_apply_handles_infinity():
    model = build_two_state(1.0, 0.0, TimeGrid(0.0, 1.0, 10))
    out = model.apply(0, np.array([1.0, np.inf]))
    assert np.all(np.isinf(out))
    out = model.apply(0, np.array([np.inf, 1.0]))
    assert np.isinf(out[0]) and out[1] == 1.0
