import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpg.core import (ConfigError, Permutation, RunConfig, WorldState, apply_permutation,
                      seeded_rng)


def test_identity_permutation_leaves_inputs():
    rng = np.random.default_rng(0)
    X, S = rng.normal(size=(4, 3)), rng.normal(size=(4, 4))
    X2, S2 = apply_permutation(Permutation.identity(4), X, S)
    assert np.array_equal(X2, X) and np.array_equal(S2, S)


def test_swap_is_self_inverse():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    S = np.eye(2)
    P = Permutation([1, 0])
    X2, S2 = apply_permutation(P, X, S)
    assert np.array_equal(X2, [[3, 4], [1, 2]])
    X3, S3 = apply_permutation(P, X2, S2)
    assert np.array_equal(X3, X) and np.array_equal(S3, S)


def test_matches_dense_matrix_form():
    rng = np.random.default_rng(1)
    P = Permutation.random(6, rng)
    X, S = rng.normal(size=(6, 2)), rng.normal(size=(6, 6))
    M = P.matrix()
    X2, S2 = apply_permutation(P, X, S)
    assert np.allclose(X2, M.T @ X, atol=0, rtol=0)
    assert np.allclose(S2, M.T @ S @ M, atol=1e-15)


def test_conjugation_preserves_row_sum_multiset():
    rng = np.random.default_rng(2)
    S = rng.normal(size=(5, 5))
    _, S2 = apply_permutation(Permutation.random(5, rng), np.zeros((5, 1)), S)
    loop = lambda A: sorted(sum(A[i, j] for j in range(5)) for i in range(5))
    assert np.allclose(loop(S2), loop(S), atol=1e-12)
    col = lambda A: sorted(sum(A[i, j] for i in range(5)) for j in range(5))
    assert np.allclose(col(S2), col(S), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_inverse_recovers_inputs_exactly(n, seed):
    rng = np.random.default_rng(seed)
    P = Permutation.random(n, rng)
    X, S = rng.normal(size=(n, 3)), rng.normal(size=(n, n))
    X2, S2 = apply_permutation(P.inverse(), *apply_permutation(P, X, S))
    assert np.array_equal(X2, X) and np.array_equal(S2, S)


def test_permutation_rejects_non_bijection_and_bad_shapes():
    with pytest.raises(ValueError):
        Permutation([0, 0, 1])
    with pytest.raises(ValueError):
        apply_permutation(Permutation.identity(3), np.zeros((2, 2)), np.zeros((3, 3)))


def test_seeded_rng_streams():
    a = seeded_rng(42).random(100)
    assert np.array_equal(a, seeded_rng(42).random(100))
    assert not np.array_equal(seeded_rng(42).random(10), seeded_rng(43).random(10))
    assert not np.array_equal(seeded_rng(42, 0).random(10), seeded_rng(42, 1).random(10))
    # a sub-stream does not depend on what else was drawn
    seeded_rng(42, 0).random(1000)
    assert np.array_equal(seeded_rng(42, 1).random(5), seeded_rng(42, 1).random(5))


def test_world_state_validation():
    with pytest.raises(ValueError):
        WorldState(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        WorldState(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))
    w = WorldState(np.zeros((1, 2)), np.ones((1, 2)))
    assert w.obstacle_positions.shape == (0, 2) and w.time_index == 0


def test_run_config_defaults_and_widths():
    c = RunConfig().validate()
    assert c.obs_width == 2 * (1 + 2 + 0 + 1)
    assert c.layer_widths == (8, 32, 2)
    assert c.robot_radius == pytest.approx(0.1 * c.min_spawn_separation)
    assert c.sense_range == pytest.approx(10 * c.coverage_radius)
    c2 = c.replace(M_goals=3)
    assert c2.layer_widths[0] == c2.obs_width == 10


@pytest.mark.parametrize("field,value", [("gamma", 1.5), ("gamma", 0.0), ("K", 0), ("dt", -1.0),
                                         ("M_robots", 3), ("dynamics_kind", "rocket")])
def test_run_config_rejects(field, value):
    with pytest.raises(ConfigError) as err:
        RunConfig(**{field: value}).validate()
    assert err.value.field == field


def test_sparse_validation_admits_small_swarms():
    c = RunConfig(n_robots=1)
    with pytest.raises(ConfigError):
        c.validate()
    c.validate(allow_sparse=True)
