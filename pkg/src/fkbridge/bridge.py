"""Two-marginal factor solver and everything derived from the factor pair.

Given endpoint densities rho0, rhoT and a strictly positive kernel for the
full leg, iterative proportional fitting finds node values f, g with

    m(x, y) = f(x) k(x, 0, y, T) g(y)

matching both marginals under trapezoid quadrature.  The pair is unique up to
one scalar: scaling f up and g down by the same constant changes nothing
observable, and the solver pins that gauge by giving f and g equal masses.

From (f, g) the slice movie follows: theta(., t) propagates g backward,
theta_star(., t) propagates f forward, their product is the interpolating
density, and 2 (ln theta)' is the forward drift.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grids import Grid, Profile, integrate
from .kernels import KernelMatrix
from .potentials import _first_derivative

__all__ = [
    "BridgeProblem",
    "BridgeSolution",
    "TransitionDensity",
    "BridgeConvergenceError",
    "solve_schrodinger_system",
    "propagate_theta",
    "transition_density",
    "drift_field",
    "drift_field_tolerant",
    "evolve_density",
]

log = logging.getLogger(__name__)

_MARGINAL_FLOOR = 1e-14   # relative to the marginal's peak
_KERNEL_FLOOR = 1e-30     # relative to the kernel's largest entry


class BridgeConvergenceError(RuntimeError):
    """Raised when fitting stalls; carries the last iterate for inspection."""

    def __init__(self, message: str, residual: float, solution: "BridgeSolution"):
        super().__init__(message)
        self.residual = residual
        self.solution = solution


@dataclass(frozen=True, eq=False)
class BridgeProblem:
    """Endpoint marginals, the full-leg kernel, and optional slice kernels.

    slice_kernels maps an interior time t to the pair (K(0, t), K(t, T)) used
    for the movie; the solve itself only needs kernel_0T.
    """

    rho0: Profile
    rhoT: Profile
    kernel_0T: KernelMatrix
    slice_kernels: tuple[tuple[float, KernelMatrix, KernelMatrix], ...] = ()

    def __post_init__(self) -> None:
        k = self.kernel_0T
        if self.rho0.grid != k.grid or self.rhoT.grid != k.grid:
            raise ValueError("marginals and kernel must share one grid")
        for p, when, name in ((self.rho0, k.s, "rho0"), (self.rhoT, k.t, "rhoT")):
            if abs(p.time - when) > 1e-12:
                raise ValueError(f"{name} is tagged t={p.time}, kernel leg says {when}")
            if np.any(p.values < 0.0):
                raise ValueError(f"{name} has negative entries")
            if abs(integrate(p) - 1.0) > 1e-8:
                raise ValueError(f"{name} is not normalized (mass {integrate(p)})")
        for t, k0t, ktT in self.slice_kernels:
            if k0t.grid != k.grid or ktT.grid != k.grid:
                raise ValueError("slice kernels must share the problem grid")
            if not (k.s < t < k.t):
                raise ValueError(f"slice time {t} outside ({k.s}, {k.t})")
            if abs(k0t.s - k.s) > 1e-12 or abs(k0t.t - t) > 1e-12:
                raise ValueError(f"slice kernel legs at t={t} do not chain from {k.s}")
            if abs(ktT.s - t) > 1e-12 or abs(ktT.t - k.t) > 1e-12:
                raise ValueError(f"slice kernel legs at t={t} do not chain to {k.t}")

    def require_no_interior_zero(self) -> None:
        for p, name in ((self.rho0, "rho0"), (self.rhoT, "rhoT")):
            if np.any(p.values[1:-1] == 0.0):
                raise ValueError(
                    f"{name} vanishes at an interior node: a single strictly "
                    "positive kernel cannot interpolate through a node; split "
                    "the domain at the zero and solve each component"
                )


@dataclass(eq=False)
class BridgeSolution:
    f: Profile
    g: Profile
    marginal_residual: float
    iterations: int
    residual_history: np.ndarray
    converged: bool
    times: list[float] = field(default_factory=list)
    theta: list[Profile] = field(default_factory=list)
    theta_star: list[Profile] = field(default_factory=list)
    rho: list[Profile] = field(default_factory=list)
    drift: list[Profile] = field(default_factory=list)


def _clip_marginal(p: Profile, name: str) -> np.ndarray:
    v = p.values.copy()
    floor = _MARGINAL_FLOOR * float(v.max())
    n_low = int(np.sum(v < floor))
    if n_low:
        log.warning("%s: clipping %d node(s) below %.3g of peak", name, n_low, _MARGINAL_FLOOR)
        v = np.maximum(v, floor)
    return v


def solve_schrodinger_system(
    problem: BridgeProblem,
    tol: float = 1e-10,
    max_iter: int = 500,
) -> BridgeSolution:
    """Iterative proportional fitting of the factor pair (f, g).

    Alternates f <- rho0 / (K g) and g <- rhoT / (K^T f) with quadrature-
    weighted kernel actions until both L1 marginal residuals fall below tol.
    Marginals are floored at 1e-14 of their peak; kernel entries are floored
    at 1e-30 of their largest value (the fit needs strict positivity, and
    the floor is far below every observable tolerance).  A node whose kernel
    row (column) is structurally zero, as at absorbing grid ends, cannot
    launch (receive) mass at all: the marginal is zeroed there, dropping a
    rounding-level sliver, and the factors stay zero there instead of
    blowing up against the floor.
    On failure raises BridgeConvergenceError carrying the last iterate.
    """
    problem.require_no_interior_zero()
    grid = problem.kernel_0T.grid
    w = grid.weights
    raw = problem.kernel_0T.entries
    kmax = float(raw.max())
    if kmax <= 0.0:
        raise ValueError("kernel is identically zero")
    K = np.maximum(raw, _KERNEL_FLOOR * kmax)

    rho0 = _clip_marginal(problem.rho0, "rho0")
    rhoT = _clip_marginal(problem.rhoT, "rhoT")

    def drop_dead_mass(v: np.ndarray, dead: np.ndarray) -> np.ndarray:
        # redistribute the dropped sliver so the two masses stay balanced
        if not dead.any():
            return v
        kept = np.where(dead, 0.0, v)
        live = float(w @ kept)
        if live <= 0.0:
            raise ValueError("marginal mass sits entirely on absorbing nodes")
        return kept * (float(w @ v) / live)

    dead_out = raw.max(axis=1) <= _KERNEL_FLOOR * kmax
    dead_in = raw.max(axis=0) <= _KERNEL_FLOOR * kmax
    rho0 = drop_dead_mass(rho0, dead_out)
    rhoT = drop_dead_mass(rhoT, dead_in)

    g = np.ones(grid.n)
    f = np.ones(grid.n)
    history: list[float] = []
    converged = False
    for _ in range(max_iter):
        f = rho0 / (K @ (w * g))
        g = rhoT / (K.T @ (w * f))
        r0 = float(w @ np.abs(f * (K @ (w * g)) - rho0))
        rT = float(w @ np.abs(g * (K.T @ (w * f)) - rhoT))
        history.append(max(r0, rT))
        if history[-1] <= tol:
            converged = True
            break

    # gauge: equal masses for the two factors
    sf = float(w @ f)
    sg = float(w @ g)
    lam = math.sqrt(sg / sf)
    f = f * lam
    g = g / lam

    sol = BridgeSolution(
        f=Profile(grid, f, problem.kernel_0T.s),
        g=Profile(grid, g, problem.kernel_0T.t),
        marginal_residual=history[-1],
        iterations=len(history),
        residual_history=np.asarray(history),
        converged=converged,
    )
    if not converged:
        raise BridgeConvergenceError(
            f"no convergence after {len(history)} iterations "
            f"(last residual {history[-1]:.3g}, tol {tol:.3g})",
            residual=history[-1],
            solution=sol,
        )
    return sol


def drift_field(theta: Profile) -> Profile:
    """Forward drift 2 (ln theta)' of the process steered by theta."""
    if np.any(theta.values <= 0.0):
        raise ValueError("theta must be strictly positive on the grid")
    b = 2.0 * _first_derivative(np.log(theta.values), theta.grid.h)
    return Profile(theta.grid, b, theta.time)


def drift_field_tolerant(theta: Profile) -> Profile:
    """Drift with absorbing-edge zeros handled by constant extrapolation.

    Dirichlet-truncated kernels force theta to vanish at the grid ends; the
    drift there is not defined by the data, so the value from the nearest
    trustworthy node is reused.  Interior zeros are still an error.
    """
    v = theta.values
    thresh = 1e-12 * float(v.max())
    ok = v > thresh
    i0 = int(np.argmax(ok))
    i1 = int(len(v) - 1 - np.argmax(ok[::-1]))
    if not np.all(ok[i0:i1 + 1]):
        raise ValueError("theta vanishes at an interior node")
    if i1 - i0 < 3:
        raise ValueError("theta is positive on fewer than 4 nodes")
    core = 2.0 * _first_derivative(np.log(v[i0:i1 + 1]), theta.grid.h)
    b = np.empty_like(v)
    b[i0:i1 + 1] = core
    b[:i0] = core[0]
    b[i1 + 1:] = core[-1]
    return Profile(theta.grid, b, theta.time)


def propagate_theta(problem: BridgeProblem, sol: BridgeSolution) -> BridgeSolution:
    """Fill the slice movie on sol: theta, theta_star, rho, drift per slice.

    theta(., t) applies the t -> T kernel to g; theta_star(., t) applies the
    transpose of the 0 -> t kernel to f.  Slice times come from the problem's
    slice kernels, with the endpoints always included.
    """
    grid = problem.kernel_0T.grid
    w = grid.weights
    s0, t1 = problem.kernel_0T.s, problem.kernel_0T.t
    f = sol.f.values
    g = sol.g.values

    entries: list[tuple[float, np.ndarray, np.ndarray]] = []
    entries.append((s0, problem.kernel_0T.entries @ (w * g), f))
    for t, k0t, ktT in sorted(problem.slice_kernels, key=lambda item: item[0]):
        th = ktT.entries @ (w * g)
        ths = k0t.entries.T @ (w * f)
        entries.append((t, th, ths))
    entries.append((t1, g, problem.kernel_0T.entries.T @ (w * f)))

    sol.times = []
    sol.theta = []
    sol.theta_star = []
    sol.rho = []
    sol.drift = []
    for t, th, ths in entries:
        theta = Profile(grid, th, t)
        sol.times.append(t)
        sol.theta.append(theta)
        sol.theta_star.append(Profile(grid, ths, t))
        sol.rho.append(Profile(grid, th * ths, t))
        sol.drift.append(drift_field_tolerant(theta))
    return sol


@dataclass(frozen=True, eq=False)
class TransitionDensity:
    """Row-stochastic transition matrix p(y_i, s -> x_j, t) on one grid.

    valid_rows flags rows that passed the mass check; rows launched from
    nodes where theta vanished (absorbing edges) are zeroed and flagged
    invalid rather than renormalized from nothing.
    """

    grid: Grid
    s: float
    t: float
    entries: np.ndarray
    valid_rows: np.ndarray

    def __post_init__(self) -> None:
        e = np.array(self.entries, dtype=float, copy=True)
        if e.shape != (self.grid.n, self.grid.n):
            raise ValueError("transition matrix shape mismatch")
        e.flags.writeable = False
        object.__setattr__(self, "entries", e)
        v = np.array(self.valid_rows, dtype=bool, copy=True)
        v.flags.writeable = False
        object.__setattr__(self, "valid_rows", v)

    def row(self, y: float) -> Profile:
        i = self.grid.index_of(y)
        if not self.valid_rows[i]:
            raise ValueError(f"row at y={y} is invalid (absorbing edge)")
        return Profile(self.grid, self.entries[i], self.t)


def transition_density(
    kernel: KernelMatrix,
    theta_s: Profile,
    theta_t: Profile,
    quad_tol: float = 1e-3,
    edge_margin: float | None = None,
) -> TransitionDensity:
    """p[i][j] = k[i][j] * theta_t[j] / theta_s[i], rows renormalized to one.

    Interior row masses (further than edge_margin from the grid ends) must
    already be within 10 * quad_tol of one — a larger defect means the theta
    profiles do not belong to this kernel.  Rows inside the margin lose mass
    to the absorbing truncation for any finite grid and are renormalized
    without complaint; rows with no mass at all are flagged invalid.
    """
    grid = kernel.grid
    if theta_s.grid != grid or theta_t.grid != grid:
        raise ValueError("theta profiles must live on the kernel grid")
    if abs(theta_s.time - kernel.s) > 1e-12 or abs(theta_t.time - kernel.t) > 1e-12:
        raise ValueError("theta profiles are tagged with the wrong times")
    if edge_margin is None:
        span = grid.x_max - grid.x_min
        edge_margin = min(6.0 * math.sqrt(2.0 * kernel.tau), 0.25 * span)
        edge_margin = max(edge_margin, 2.0 * grid.h)

    ths = theta_s.values
    tht = theta_t.values
    num = kernel.entries * tht[None, :]
    launchable = ths > 0.0
    p = np.zeros_like(num)
    p[launchable] = num[launchable] / ths[launchable, None]
    sums = p @ grid.weights

    interior = (grid.nodes >= grid.x_min + edge_margin) & (grid.nodes <= grid.x_max - edge_margin)
    check = interior & launchable
    if np.any(check):
        worst = float(np.max(np.abs(sums[check] - 1.0)))
        if worst > 10.0 * quad_tol:
            raise ValueError(
                f"interior transition rows integrate to 1 +- {worst:.3g}, beyond "
                f"10*quad_tol = {10 * quad_tol:.3g}: theta does not match this kernel"
            )
    valid = launchable & (sums > 0.5)
    p[valid] /= sums[valid, None]
    p[~valid] = 0.0
    return TransitionDensity(grid, kernel.s, kernel.t, p, valid)


def evolve_density(td: TransitionDensity, rho: Profile) -> Profile:
    """Push a density one leg forward: rho_t(x) = int rho_s(y) p(y, x) dy."""
    if rho.grid != td.grid:
        raise ValueError("density must live on the transition grid")
    out = (td.grid.weights * rho.values) @ td.entries
    return Profile(td.grid, out, td.t)
