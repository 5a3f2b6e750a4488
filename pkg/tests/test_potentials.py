import math

import numpy as np
import pytest

from fkbridge import (
    Profile,
    centrifugal_energy,
    centrifugal_potential,
    evaluate_potential,
    free_potential,
    gaussian_case_potential,
    harmonic_potential,
    make_uniform_grid,
    moving_node_potential,
    nodal_case_potential,
    potential_from_drift,
    quantum_potential_from_density,
    tabulated_potential,
    time_reversed,
)

X = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])


def test_free_is_zero():
    spec = free_potential()
    np.testing.assert_array_equal(spec.values(X, 0.3), np.zeros(5))
    assert spec.singular_set == ()


def test_harmonic_shifted_by_ground_level():
    spec = harmonic_potential()
    np.testing.assert_allclose(spec.values(X, 1.7), X * X - 1.0, rtol=0, atol=0)


def test_gaussian_case_values():
    spec = gaussian_case_potential()
    for t in (0.0, 0.5, 2.0):
        s2 = 1.0 + t * t
        expect = X * X / (2.0 * s2 * s2) - 1.0 / s2
        np.testing.assert_allclose(spec.values(X, t), expect, rtol=1e-15)


def test_nodal_case_is_smooth_everywhere():
    # same parabola as the gaussian case but three ground levels down
    spec = nodal_case_potential()
    for t in (0.0, 1.0):
        s2 = 1.0 + t * t
        expect = X * X / (2.0 * s2 * s2) - 3.0 / s2
        np.testing.assert_allclose(spec.values(X, t), expect, rtol=1e-15)
    assert spec.singular_set == ()
    assert np.all(np.isfinite(spec.values(np.array([0.0]), 0.5)))


def test_centrifugal_values_and_singularity():
    spec = centrifugal_potential(1.0)
    alpha = math.sqrt(9.0)
    x = np.array([0.5, 1.0, 2.0])
    expect = x * x + 2.0 / (x * x) - (2.0 + alpha)
    np.testing.assert_allclose(spec.values(x, 0.0), expect, rtol=1e-15)
    assert evaluate_potential(spec, 0.0, 0.0) == math.inf
    assert spec.is_singular_at(0.0, 0.0)
    assert spec.singular_set == (0.0,)


def test_centrifugal_gamma_zero_is_regular():
    spec = centrifugal_potential(0.0)
    assert spec.singular_set == ()
    assert np.isfinite(evaluate_potential(spec, 0.0, 0.0))


def test_centrifugal_rejects_bad_gamma():
    with pytest.raises(ValueError):
        centrifugal_potential(-0.5)
    with pytest.raises(ValueError):
        centrifugal_potential(-0.01)


def test_centrifugal_energy_ladder():
    # E_n = 4n + 2 + sqrt(1 + 8 gamma)
    assert centrifugal_energy(1.0, 0) == pytest.approx(5.0, abs=1e-15)
    assert centrifugal_energy(1.0, 1) == pytest.approx(9.0, abs=1e-15)
    assert centrifugal_energy(0.0, 0) == pytest.approx(3.0, abs=1e-15)


def test_moving_node_singular_only_at_nodal_event():
    spec = moving_node_potential(0.5)
    assert spec.singular_set == (0.0,)
    assert evaluate_potential(spec, 0.0, 0.5) == math.inf
    # finite at the node location away from the nodal instant
    assert np.isfinite(evaluate_potential(spec, 0.0, 0.0))
    assert np.isfinite(evaluate_potential(spec, 0.0, 0.9))
    # finite at the nodal instant away from the node
    assert np.isfinite(evaluate_potential(spec, 0.3, 0.5))


def test_moving_node_nodal_instant_identity():
    # at t = alpha the potential collapses to x^2/4 + 2/x^2 - 5/2
    spec = moving_node_potential(0.5)
    x = np.array([0.5, 1.0, 2.0, 3.0])
    expect = x * x / 4.0 + 2.0 / (x * x) - 2.5
    np.testing.assert_allclose(spec.values(x, 0.5), expect, rtol=0, atol=1e-12)


def test_moving_node_center_value_between_instants():
    # at x = 0 with s = t - alpha nonzero the bracket terms collapse to
    # -1/(2(1+s^2)) - s^2/(s^2(1+s^2)) = -3/(2(1+s^2))
    spec = moving_node_potential(0.5)
    for t in (0.0, 0.25, 1.0):
        s = t - 0.5
        got = evaluate_potential(spec, 0.0, t)
        assert got == pytest.approx(-1.5 / (1.0 + s * s), rel=1e-12)


def test_max_abs_on():
    spec = harmonic_potential()
    grid = make_uniform_grid(-2.0, 2.0, 5)
    assert spec.max_abs_on(grid, [0.0, 1.0]) == pytest.approx(3.0)
    cspec = centrifugal_potential(1.0)
    half = make_uniform_grid(0.0, 2.0, 5)
    assert cspec.max_abs_on(half, [0.0]) == math.inf


def test_tabulated_potential_interpolates():
    grid = make_uniform_grid(0.0, 1.0, 11)
    p0 = Profile(grid, np.zeros(11), 0.0)
    p1 = Profile(grid, grid.nodes.copy(), 1.0)
    spec = tabulated_potential([p0, p1])
    # halfway in time, halfway in space
    assert evaluate_potential(spec, 0.5, 0.5) == pytest.approx(0.25, abs=1e-12)
    np.testing.assert_allclose(spec.values(grid.nodes, 1.0), grid.nodes,
                               atol=1e-12)


def test_tabulated_potential_validation():
    grid = make_uniform_grid(0.0, 1.0, 11)
    p0 = Profile(grid, np.zeros(11), 0.0)
    with pytest.raises(ValueError):
        tabulated_potential([p0])
    with pytest.raises(ValueError):
        tabulated_potential([p0, Profile(grid, np.ones(11), 0.0)])


def test_time_reversed_window():
    spec = gaussian_case_potential()
    rev = time_reversed(spec, 0.0, 1.0)
    x = np.array([0.7, 1.3])
    np.testing.assert_allclose(rev.values(x, 0.25), spec.values(x, 0.75),
                               rtol=1e-15)


def test_quantum_potential_from_density():
    # rho = exp(-x^2): (sqrt rho)'' / sqrt rho = x^2 - 1
    grid = make_uniform_grid(-3.0, 3.0, 601)
    rho = Profile(grid, np.exp(-grid.nodes**2), 0.0)
    q = quantum_potential_from_density(rho)
    inner = np.abs(grid.nodes) <= 2.0
    expect = grid.nodes[inner] ** 2 - 1.0
    assert np.max(np.abs(q.values[inner] - expect)) < 5e-4


def test_quantum_potential_rejects_interior_zero():
    grid = make_uniform_grid(-1.0, 1.0, 21)
    vals = np.abs(grid.nodes)  # zero in the middle
    with pytest.raises(ValueError, match="interior zero"):
        quantum_potential_from_density(Profile(grid, vals, 0.0))


def test_potential_from_drift_stationary():
    # b = -2x comes from g = exp(-x^2/2); recovered c must be x^2 - 1
    grid = make_uniform_grid(-3.0, 3.0, 301)
    b = Profile(grid, -2.0 * grid.nodes, 0.0)
    c = potential_from_drift(b)
    np.testing.assert_allclose(c.values, grid.nodes**2 - 1.0, atol=1e-9)


def test_potential_from_drift_with_time_term():
    grid = make_uniform_grid(-2.0, 2.0, 201)
    b = Profile(grid, -2.0 * grid.nodes, 0.0)
    extra = Profile(grid, np.full(201, 0.25), 0.0)
    c = potential_from_drift(b, extra)
    np.testing.assert_allclose(c.values, grid.nodes**2 - 0.75, atol=1e-9)
