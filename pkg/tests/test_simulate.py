"""Path ensembles: the EM integrator, density estimates, and local moments."""

import math

import numpy as np
import pytest

from fkbridge import (
    Profile,
    TransitionDensity,
    empirical_density,
    heat_kernel,
    integrate,
    l1_distance,
    load_ensemble,
    make_uniform_grid,
    moments_from_paths,
    moments_from_transitions,
    normalize,
    save_ensemble,
    simulate_paths,
)


def constant_drift(grid, value, times):
    return [Profile(grid, np.full(grid.n, value), t) for t in times]


def linear_drift(grid, slope, times):
    return [Profile(grid, slope * grid.nodes, t) for t in times]


GRID = make_uniform_grid(-10.0, 10.0, 401)


class TestSimulatePaths:
    def test_initial_sampler_matches_density(self):
        vals = np.exp(-0.5 * ((GRID.nodes - 0.3) / 0.7) ** 2)
        rho = normalize(Profile(GRID, vals, 0.0))
        ens = simulate_paths(
            constant_drift(GRID, 0.0, [0.0, 1.0]), 20000, seed=3,
            rho_init=rho, n_steps=100, record_times=[0.0])
        start = ens.samples_at(0)
        assert abs(start.mean() - 0.3) <= 4.0 * 0.7 / math.sqrt(20000)
        assert np.var(start) == pytest.approx(0.49, rel=0.05)

    def test_free_diffusion_variance_grows_at_rate_two(self):
        ens = simulate_paths(
            constant_drift(GRID, 0.0, [0.0, 1.0]), 20000, seed=4,
            x_init=0.0, n_steps=1000, record_times=[0.5, 1.0])
        half = ens.samples_at(0)
        final = ens.samples_at(1)
        assert np.var(half) == pytest.approx(1.0, abs=0.05)
        assert np.var(final) == pytest.approx(2.0, abs=0.08)
        assert abs(final.mean()) <= 4.0 * math.sqrt(2.0 / 20000)

    def test_linear_pull_reaches_its_stationary_spread(self):
        # dx = -x dt + sqrt(2) dW has var(t) = 1 - e^{-2t} from a point start
        times = [0.0, 1.0, 2.0]
        ens = simulate_paths(
            linear_drift(GRID, -1.0, times), 8000, seed=5,
            x_init=0.0, n_steps=200, record_times=[2.0])
        target = 1.0 - math.exp(-4.0)
        assert np.var(ens.samples_at(0)) == pytest.approx(target, abs=0.06)

    def test_estimated_density_tracks_the_closed_form(self):
        ens = simulate_paths(
            constant_drift(GRID, 0.0, [0.0, 0.5]), 40000, seed=6,
            x_init=0.0, n_steps=100, record_times=[0.5])
        kde = empirical_density(ens.samples_at(0), GRID, 0.5)
        closed = Profile(GRID, np.array(
            [heat_kernel(0.0, float(x), 0.5) for x in GRID.nodes]), 0.5)
        assert l1_distance(kde, normalize(closed)) <= 0.03

    def test_absorbing_walls_freeze_paths(self):
        ens = simulate_paths(
            constant_drift(GRID, 0.0, [0.0, 1.0]), 5000, seed=7,
            x_init=0.0, n_steps=400, record_times=[1.0], domain=(-1.0, 1.0))
        assert ens.n_absorbed > 0
        absorbed = ens.absorbed_step >= 0
        assert np.isin(ens.positions[absorbed, -1], [-1.0, 1.0]).all()
        # lowest Dirichlet mode on a unit-halfwidth interval decays at
        # (pi/2)^2, leaving about 11 percent alive at t = 1
        frac = ens.samples_at(0).size / 5000.0
        assert 0.07 <= frac <= 0.15

    def test_node_guard_keeps_live_paths_clear(self):
        ens = simulate_paths(
            constant_drift(GRID, 0.0, [0.0, 1.0]), 3000, seed=8,
            x_init=0.5, n_steps=200, record_times=[0.5, 1.0],
            node=0.0, node_halfwidth=0.05)
        for r in range(2):
            live = ens.samples_at(r)
            assert (np.abs(live) >= 0.05).all()
        # crossings either bisect to a clear spot or end up flagged
        assert ens.n_flagged >= 0
        again = simulate_paths(
            constant_drift(GRID, 0.0, [0.0, 1.0]), 3000, seed=8,
            x_init=0.5, n_steps=200, record_times=[0.5, 1.0],
            node=0.0, node_halfwidth=0.05)
        np.testing.assert_array_equal(again.positions, ens.positions)

    def test_validation_errors(self):
        drifts = constant_drift(GRID, 0.0, [0.0, 1.0])
        with pytest.raises(ValueError, match="two or more times"):
            simulate_paths(constant_drift(GRID, 0.0, [0.0]), 100, seed=0,
                           x_init=0.0, n_steps=100)
        with pytest.raises(ValueError, match="at most"):
            simulate_paths(drifts, 100, seed=0, x_init=0.0, n_steps=99)
        with pytest.raises(ValueError, match="exactly one"):
            simulate_paths(drifts, 100, seed=0, n_steps=100)
        with pytest.raises(ValueError, match="exactly one"):
            simulate_paths(drifts, 100, seed=0, x_init=0.0,
                           rho_init=normalize(Profile(GRID, np.ones(GRID.n), 0.0)),
                           n_steps=100)
        with pytest.raises(ValueError, match="lattice"):
            simulate_paths(drifts, 100, seed=0, x_init=0.0, n_steps=100,
                           record_times=[0.333])
        with pytest.raises(ValueError, match="outside the domain"):
            simulate_paths(drifts, 100, seed=0, x_init=3.0, n_steps=100,
                           domain=(-1.0, 1.0))
        with pytest.raises(ValueError, match="guard band"):
            simulate_paths(drifts, 100, seed=0, x_init=0.01, n_steps=100,
                           node=0.0, node_halfwidth=0.05)
        with pytest.raises(ValueError, match="two paths"):
            simulate_paths(drifts, 1, seed=0, x_init=0.0, n_steps=100)
        with pytest.raises(ValueError, match="increasing"):
            simulate_paths(constant_drift(GRID, 0.0, [1.0, 0.0]), 100, seed=0,
                           x_init=0.0, n_steps=100)


class TestEnsembleIO:
    def test_roundtrip(self, tmp_path):
        ens = simulate_paths(
            constant_drift(GRID, 0.0, [0.0, 1.0]), 200, seed=9,
            x_init=0.0, n_steps=100, record_times=[0.5, 1.0], domain=(-1.5, 1.5))
        path = tmp_path / "e.fke"
        save_ensemble(ens, path)
        back = load_ensemble(path)
        # positions are stored in single precision
        np.testing.assert_array_equal(
            back.positions, ens.positions.astype("<f4").astype(float))
        np.testing.assert_array_equal(back.times, ens.times)
        np.testing.assert_array_equal(back.absorbed_step, ens.absorbed_step)
        np.testing.assert_array_equal(back.flagged_step, ens.flagged_step)
        assert (back.n_steps, back.seed) == (ens.n_steps, ens.seed)
        assert (back.t0, back.t1) == (ens.t0, ens.t1)

    def test_rejects_corruption(self, tmp_path):
        ens = simulate_paths(
            constant_drift(GRID, 0.0, [0.0, 1.0]), 50, seed=9,
            x_init=0.0, n_steps=100, record_times=[1.0])
        path = tmp_path / "e.fke"
        save_ensemble(ens, path)
        raw = path.read_bytes()
        bad = tmp_path / "bad.fke"
        bad.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError, match="magic"):
            load_ensemble(bad)
        short = tmp_path / "short.fke"
        short.write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="length|truncated"):
            load_ensemble(short)


class TestEmpiricalDensity:
    def test_normal_sample_recovers_its_density(self):
        rng = np.random.default_rng(12)
        samples = rng.standard_normal(40000)
        grid = make_uniform_grid(-8.0, 8.0, 401)
        kde = empirical_density(samples, grid, 0.0)
        closed = normalize(Profile(grid, np.exp(-0.5 * grid.nodes ** 2), 0.0))
        assert l1_distance(kde, closed) <= 0.03
        assert integrate(kde) == pytest.approx(1.0, abs=1e-12)

    def test_explicit_bandwidth(self):
        rng = np.random.default_rng(13)
        samples = rng.standard_normal(5000)
        grid = make_uniform_grid(-8.0, 8.0, 401)
        kde = empirical_density(samples, grid, 0.0, bandwidth=0.25)
        assert integrate(kde) == pytest.approx(1.0, abs=1e-12)

    def test_rejections(self):
        grid = make_uniform_grid(-8.0, 8.0, 101)
        with pytest.raises(ValueError, match="two samples"):
            empirical_density(np.array([1.0]), grid, 0.0)
        with pytest.raises(ValueError, match="finite"):
            empirical_density(np.array([1.0, np.inf]), grid, 0.0)
        with pytest.raises(ValueError, match="zero spread"):
            empirical_density(np.array([1.0, 1.0, 1.0]), grid, 0.0)
        with pytest.raises(ValueError, match="bandwidth"):
            empirical_density(np.array([0.0, 1.0]), grid, 0.0, bandwidth=-1.0)
        with pytest.raises(ValueError, match="outside the grid"):
            empirical_density(np.array([50.0, 51.0]), grid, 0.0, bandwidth=0.01)


class TestPointMoments:
    def test_two_point_sample_by_hand(self):
        m = moments_from_paths(np.array([0.2, 0.4]), x0=0.1, delta=0.1)
        assert m.drift == pytest.approx(2.0, rel=1e-12)
        assert m.diffusion == pytest.approx(0.5, rel=1e-12)
        assert m.drift_se == pytest.approx(1.0, rel=1e-12)
        assert m.diffusion_se == pytest.approx(0.4, rel=1e-12)
        assert m.n_samples == 2

    def test_rejections(self):
        with pytest.raises(ValueError, match="two samples"):
            moments_from_paths(np.array([1.0]), 0.0, 0.1)
        with pytest.raises(ValueError, match="delta"):
            moments_from_paths(np.array([1.0, 2.0]), 0.0, 0.0)


def gaussian_transition_rows(grid, slope, s, delta):
    """Rows N(y + b(y) delta, 2 delta) with b(y) = slope * y, renormalized."""
    y = grid.nodes[:, None]
    x = grid.nodes[None, :]
    mean = y + slope * y * delta
    entries = np.exp(-((x - mean) ** 2) / (4.0 * delta)) / math.sqrt(4.0 * math.pi * delta)
    sums = entries @ grid.weights
    ok = sums > 0.5
    entries[ok] /= sums[ok, None]
    return TransitionDensity(grid, s, s + delta, entries, ok)


class TestTransitionMoments:
    def test_extrapolates_drift_and_diffusion(self):
        grid = make_uniform_grid(-4.0, 4.0, 801)
        tds = [gaussian_transition_rows(grid, -1.0, 0.0, d)
               for d in (0.01, 0.005, 0.0025)]
        m = moments_from_transitions(tds, x0=0.7, eps=0.5)
        assert m.drift == pytest.approx(-0.7, abs=5e-3)
        assert m.diffusion == pytest.approx(2.0, rel=5e-3)
        # wider lags leak more mass past the truncation window
        assert m.escape_per_delta[0] > m.escape_per_delta[1] > m.escape_per_delta[2]
        np.testing.assert_array_equal(m.deltas, [0.01, 0.005, 0.0025])

    def test_rejections(self):
        grid = make_uniform_grid(-4.0, 4.0, 801)
        tds = [gaussian_transition_rows(grid, 0.0, 0.0, d)
               for d in (0.01, 0.005, 0.0025)]
        with pytest.raises(ValueError, match="three lags"):
            moments_from_transitions(tds[:2], 0.0, 0.5)
        with pytest.raises(ValueError, match="strictly decreasing"):
            moments_from_transitions(tds[::-1], 0.0, 0.5)
        with pytest.raises(ValueError, match="three grid steps"):
            moments_from_transitions(tds, 0.0, 0.01)
        other = [gaussian_transition_rows(grid, 0.0, 0.5, d)
                 for d in (0.01, 0.005, 0.0025)]
        with pytest.raises(ValueError, match="one time"):
            moments_from_transitions([tds[0], other[1], tds[2]], 0.0, 0.5)
