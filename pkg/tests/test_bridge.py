"""Endpoint-marginal fitting, factor propagation, and transition densities."""

import math

import numpy as np
import pytest

from fkbridge import (
    BridgeConvergenceError,
    BridgeProblem,
    Profile,
    assemble_kernel_legs,
    assemble_kernel_pde,
    drift_field,
    drift_field_tolerant,
    evolve_density,
    free_potential,
    heat_kernel,
    integrate,
    kernel_from_function,
    make_uniform_grid,
    normalize,
    propagate_theta,
    solve_schrodinger_system,
    transition_density,
    KernelMatrix,
)


def gaussian_profile(grid, center, sigma, time):
    vals = np.exp(-0.5 * ((grid.nodes - center) / sigma) ** 2)
    return normalize(Profile(grid, vals, time))


def small_problem(n=121, t_end=0.7):
    # profiles wide enough that no node sits below the solver's marginal
    # floor, so the fitted problem is exactly the stated one
    grid = make_uniform_grid(-6.0, 6.0, n)
    kern = kernel_from_function(grid, 0.0, t_end, heat_kernel)
    rho0 = gaussian_profile(grid, -0.8, 1.2, 0.0)
    rhoT = gaussian_profile(grid, 0.9, 1.0, t_end)
    return BridgeProblem(rho0=rho0, rhoT=rhoT, kernel_0T=kern)


def reference_joint(problem, iters=500):
    """Fixed point of the fitting recursion in extended precision; the
    factor pair is gauge-dependent but the joint density f K g is not."""
    w = problem.kernel_0T.grid.weights.astype(np.longdouble)
    K = problem.kernel_0T.entries.astype(np.longdouble)
    r0 = problem.rho0.values.astype(np.longdouble)
    rT = problem.rhoT.values.astype(np.longdouble)
    f = np.ones_like(r0)
    g = np.ones_like(rT)
    for _ in range(iters):
        f = r0 / (K @ (w * g))
        g = rT / (K.T @ (w * f))
    return (f[:, None] * K * g[None, :]).astype(float)


class TestSolve:
    def test_matches_extended_precision_fixed_point(self):
        problem = small_problem()
        sol = solve_schrodinger_system(problem, tol=1e-12)
        joint = sol.f.values[:, None] * problem.kernel_0T.entries * sol.g.values[None, :]
        np.testing.assert_allclose(joint, reference_joint(problem), rtol=1e-9, atol=1e-16)

    def test_reproduces_both_marginals(self):
        problem = small_problem()
        sol = solve_schrodinger_system(problem, tol=1e-12)
        grid = problem.kernel_0T.grid
        w = grid.weights
        K = problem.kernel_0T.entries
        m0 = sol.f.values * (K @ (w * sol.g.values))
        mT = sol.g.values * (K.T @ (w * sol.f.values))
        assert w @ np.abs(m0 - problem.rho0.values) <= 1e-12
        assert w @ np.abs(mT - problem.rhoT.values) <= 1e-12
        assert sol.converged
        assert sol.marginal_residual <= 1e-12
        assert sol.iterations == len(sol.residual_history)

    def test_factor_masses_are_balanced(self):
        # the pair is fixed only up to a constant; the solver picks the
        # gauge with equal factor masses
        problem = small_problem()
        sol = solve_schrodinger_system(problem)
        grid = problem.kernel_0T.grid
        sf = grid.weights @ sol.f.values
        sg = grid.weights @ sol.g.values
        assert sf == pytest.approx(sg, rel=1e-12)

    def test_joint_density_ignores_kernel_scale(self):
        problem = small_problem()
        sol = solve_schrodinger_system(problem, tol=1e-12)
        kern = problem.kernel_0T
        scaled = BridgeProblem(
            rho0=problem.rho0,
            rhoT=problem.rhoT,
            kernel_0T=KernelMatrix(kern.grid, kern.s, kern.t, 7.5 * kern.entries),
        )
        sol2 = solve_schrodinger_system(scaled, tol=1e-12)
        joint1 = sol.f.values[:, None] * kern.entries * sol.g.values[None, :]
        joint2 = sol2.f.values[:, None] * scaled.kernel_0T.entries * sol2.g.values[None, :]
        np.testing.assert_allclose(joint2, joint1, rtol=1e-9, atol=1e-16)

    def test_absorbing_walls_zero_the_factors(self):
        grid = make_uniform_grid(-8.0, 8.0, 401)
        kern = assemble_kernel_pde(free_potential(), grid, 0.0, 1.0, 128)
        rho0 = gaussian_profile(grid, -1.0, 1.0, 0.0)
        rhoT = gaussian_profile(grid, 1.0, 1.0, 1.0)
        sol = solve_schrodinger_system(
            BridgeProblem(rho0=rho0, rhoT=rhoT, kernel_0T=kern), tol=1e-10)
        assert sol.converged
        assert sol.f.values[0] == 0.0 and sol.f.values[-1] == 0.0
        assert sol.g.values[0] == 0.0 and sol.g.values[-1] == 0.0
        w = grid.weights
        m0 = sol.f.values * (kern.entries @ (w * sol.g.values))
        # the wall slivers of the input mass were dropped, so compare
        # against the original marginal with a matching allowance
        assert w @ np.abs(m0 - rho0.values) <= 1e-9

    def test_nonconvergence_carries_partial_solution(self):
        problem = small_problem()
        with pytest.raises(BridgeConvergenceError) as info:
            solve_schrodinger_system(problem, tol=1e-14, max_iter=2)
        err = info.value
        assert err.residual > 0.0
        assert not err.solution.converged
        assert err.solution.iterations == 2
        assert len(err.solution.residual_history) == 2

    def test_interior_zero_is_rejected(self):
        grid = make_uniform_grid(-6.0, 6.0, 121)
        kern = kernel_from_function(grid, 0.0, 0.7, heat_kernel)
        vals = np.exp(-grid.nodes ** 2)
        vals[60] = 0.0
        rho0 = normalize(Profile(grid, vals, 0.0))
        rhoT = gaussian_profile(grid, 0.0, 1.0, 0.7)
        with pytest.raises(ValueError, match="split the domain"):
            solve_schrodinger_system(BridgeProblem(rho0=rho0, rhoT=rhoT, kernel_0T=kern))

    def test_zero_kernel_is_rejected(self):
        grid = make_uniform_grid(-6.0, 6.0, 121)
        kern = KernelMatrix(grid, 0.0, 0.7, np.zeros((121, 121)))
        rho0 = gaussian_profile(grid, 0.0, 1.0, 0.0)
        rhoT = gaussian_profile(grid, 0.0, 1.0, 0.7)
        with pytest.raises(ValueError, match="identically zero"):
            solve_schrodinger_system(BridgeProblem(rho0=rho0, rhoT=rhoT, kernel_0T=kern))


class TestProblemValidation:
    def test_rejects_inconsistent_inputs(self):
        grid = make_uniform_grid(-6.0, 6.0, 121)
        other = make_uniform_grid(-6.0, 6.0, 122)
        kern = kernel_from_function(grid, 0.0, 0.7, heat_kernel)
        rho0 = gaussian_profile(grid, 0.0, 1.0, 0.0)
        rhoT = gaussian_profile(grid, 0.0, 1.0, 0.7)
        with pytest.raises(ValueError, match="share one grid"):
            BridgeProblem(rho0=gaussian_profile(other, 0.0, 1.0, 0.0),
                          rhoT=rhoT, kernel_0T=kern)
        with pytest.raises(ValueError, match="tagged"):
            BridgeProblem(rho0=gaussian_profile(grid, 0.0, 1.0, 0.1),
                          rhoT=rhoT, kernel_0T=kern)
        with pytest.raises(ValueError, match="not normalized"):
            BridgeProblem(rho0=Profile(grid, 2.0 * rho0.values, 0.0),
                          rhoT=rhoT, kernel_0T=kern)

    def test_rejects_bad_slice_kernels(self):
        grid = make_uniform_grid(-6.0, 6.0, 121)
        kern = kernel_from_function(grid, 0.0, 0.7, heat_kernel)
        rho0 = gaussian_profile(grid, 0.0, 1.0, 0.0)
        rhoT = gaussian_profile(grid, 0.0, 1.0, 0.7)
        k0a = kernel_from_function(grid, 0.0, 0.3, heat_kernel)
        kaT = kernel_from_function(grid, 0.3, 0.7, heat_kernel)
        BridgeProblem(rho0=rho0, rhoT=rhoT, kernel_0T=kern,
                      slice_kernels=((0.3, k0a, kaT),))
        with pytest.raises(ValueError, match="outside"):
            BridgeProblem(rho0=rho0, rhoT=rhoT, kernel_0T=kern,
                          slice_kernels=((0.9, k0a, kaT),))
        with pytest.raises(ValueError, match="chain"):
            BridgeProblem(rho0=rho0, rhoT=rhoT, kernel_0T=kern,
                          slice_kernels=((0.25, k0a, kaT),))


class TestDriftField:
    def test_gaussian_log_slope_is_exact(self):
        # ln theta is a quadratic, so the centered stencil is exact
        grid = make_uniform_grid(-4.0, 4.0, 161)
        theta = Profile(grid, np.exp(-0.5 * grid.nodes ** 2), 0.3)
        b = drift_field(theta)
        assert b.time == 0.3
        np.testing.assert_allclose(b.values, -2.0 * grid.nodes, atol=1e-10)

    def test_rejects_nonpositive_theta(self):
        grid = make_uniform_grid(-4.0, 4.0, 161)
        vals = np.exp(-grid.nodes ** 2)
        vals[0] = 0.0
        with pytest.raises(ValueError, match="strictly positive"):
            drift_field(Profile(grid, vals, 0.0))

    def test_tolerant_extends_past_dead_edges(self):
        grid = make_uniform_grid(-4.0, 4.0, 161)
        vals = np.exp(-0.5 * grid.nodes ** 2)
        vals[:3] = 0.0
        vals[-3:] = 0.0
        b = drift_field_tolerant(Profile(grid, vals, 0.0))
        live = slice(3, 158)
        np.testing.assert_allclose(b.values[live], -2.0 * grid.nodes[live], atol=1e-10)
        assert (b.values[:3] == b.values[3]).all()
        assert (b.values[-3:] == b.values[-4]).all()

    def test_tolerant_matches_plain_when_positive(self):
        grid = make_uniform_grid(-4.0, 4.0, 161)
        theta = Profile(grid, np.exp(-0.5 * grid.nodes ** 2), 0.0)
        np.testing.assert_array_equal(
            drift_field_tolerant(theta).values, drift_field(theta).values)

    def test_tolerant_rejects_interior_zero_and_tiny_support(self):
        grid = make_uniform_grid(-4.0, 4.0, 161)
        vals = np.exp(-0.5 * grid.nodes ** 2)
        vals[80] = 0.0
        with pytest.raises(ValueError, match="interior node"):
            drift_field_tolerant(Profile(grid, vals, 0.0))
        tiny = np.zeros(161)
        tiny[80:83] = 1.0
        with pytest.raises(ValueError, match="fewer than 4"):
            drift_field_tolerant(Profile(grid, tiny, 0.0))


def solved_with_slices(n=121, t_end=0.8, slices=(0.2, 0.4, 0.6)):
    grid = make_uniform_grid(-6.0, 6.0, n)
    kern = kernel_from_function(grid, 0.0, t_end, heat_kernel)
    pairs = tuple(
        (t,
         kernel_from_function(grid, 0.0, t, heat_kernel),
         kernel_from_function(grid, t, t_end, heat_kernel))
        for t in slices)
    problem = BridgeProblem(
        rho0=gaussian_profile(grid, -0.8, 1.2, 0.0),
        rhoT=gaussian_profile(grid, 0.9, 1.0, t_end),
        kernel_0T=kern,
        slice_kernels=pairs)
    sol = propagate_theta(problem, solve_schrodinger_system(problem, tol=1e-12))
    return problem, sol


class TestPropagation:
    def test_movie_slices_are_consistent(self):
        problem, sol = solved_with_slices()
        assert sol.times == [0.0, 0.2, 0.4, 0.6, 0.8]
        assert len(sol.theta) == len(sol.theta_star) == len(sol.rho) == len(sol.drift) == 5
        for t, th, ths, rho in zip(sol.times, sol.theta, sol.theta_star, sol.rho):
            assert th.time == ths.time == rho.time == t
            np.testing.assert_array_equal(rho.values, th.values * ths.values)
        # endpoint slices recover the data
        assert integrate(Profile(problem.kernel_0T.grid,
                                 np.abs(sol.rho[0].values - problem.rho0.values),
                                 0.0)) <= 1e-10
        assert integrate(Profile(problem.kernel_0T.grid,
                                 np.abs(sol.rho[-1].values - problem.rhoT.values),
                                 0.8)) <= 1e-10

    def test_interior_slices_keep_unit_mass(self):
        # closed-form legs compose only to quadrature accuracy on h = 0.1
        _, sol = solved_with_slices()
        for rho in sol.rho:
            assert integrate(rho) == pytest.approx(1.0, abs=1e-6)


class TestTransitionDensity:
    def test_rows_are_normalized_and_push_the_density(self):
        problem, sol = solved_with_slices()
        grid = problem.kernel_0T.grid
        t, k0a, _ = problem.slice_kernels[0]
        td = transition_density(k0a, sol.theta[0], sol.theta[1])
        sums = td.entries @ grid.weights
        np.testing.assert_allclose(sums[td.valid_rows], 1.0, atol=1e-12)
        pushed = evolve_density(td, sol.rho[0])
        gap = integrate(Profile(grid, np.abs(pushed.values - sol.rho[1].values), t))
        assert gap <= 1e-6

    def test_markov_composition(self):
        problem, sol = solved_with_slices()
        grid = problem.kernel_0T.grid
        _, k0a, _ = problem.slice_kernels[0]
        kab = kernel_from_function(grid, 0.2, 0.4, heat_kernel)
        k0b = kernel_from_function(grid, 0.0, 0.4, heat_kernel)
        p0a = transition_density(k0a, sol.theta[0], sol.theta[1])
        pab = transition_density(kab, sol.theta[1], sol.theta[2])
        p0b = transition_density(k0b, sol.theta[0], sol.theta[2])
        composed = (p0a.entries * grid.weights[None, :]) @ pab.entries
        both = p0a.valid_rows & p0b.valid_rows
        central = np.abs(grid.nodes) <= 3.0
        sel = both & central
        gap = np.abs(composed[sel] - p0b.entries[sel]).max()
        # compounded trapezoid error on h = 0.1 for entries of order one
        assert gap <= 1e-5

    def test_row_access_and_validation(self):
        problem, sol = solved_with_slices()
        _, k0a, _ = problem.slice_kernels[0]
        td = transition_density(k0a, sol.theta[0], sol.theta[1])
        row = td.row(0.5)
        assert row.time == 0.2
        with pytest.raises(ValueError, match="tagged with the wrong times"):
            transition_density(k0a, sol.theta[0], sol.theta[2])
        warped = Profile(sol.theta[1].grid,
                         sol.theta[1].values * (1.0 + sol.theta[1].grid.nodes ** 2),
                         sol.theta[1].time)
        with pytest.raises(ValueError, match="does not match this kernel"):
            transition_density(k0a, sol.theta[0], warped)
