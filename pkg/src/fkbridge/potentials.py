"""Potential catalog and the density/drift -> potential reconstructions.

Each catalog entry is the renormalized potential c(x, t) that enters the
forward/backward heat pair driving a particular interpolation case.  Stored
renormalizations shift the relevant ground-state eigenvalue to zero so that
long-time kernel propagation stays O(1).  Singular points evaluate to +inf,
never NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grids import Grid, Profile

__all__ = [
    "PotentialSpec",
    "free_potential",
    "harmonic_potential",
    "gaussian_case_potential",
    "nodal_case_potential",
    "centrifugal_potential",
    "moving_node_potential",
    "tabulated_potential",
    "time_reversed",
    "evaluate_potential",
    "quantum_potential_from_density",
    "potential_from_drift",
]

_KINDS = ("free", "harmonic", "gaussian_case", "nodal_case", "centrifugal",
          "moving_node", "tabulated")


@dataclass(frozen=True, eq=False)
class PotentialSpec:
    """Evaluable potential: a catalog kind plus its parameters.

    energy_shift is the constant already subtracted from the raw potential
    (the stored renormalization).  singular_set lists spatial points where the
    potential is +inf for at least one time in its window; evaluation is still
    finite away from those points and, for the moving-node kind, finite at
    those points for times other than the nodal instant.
    """

    kind: str
    gamma: float = 0.0
    alpha: float = 0.0
    energy_shift: float = 0.0
    lower_bound: float = 0.0
    singular_set: tuple[float, ...] = ()
    profiles: tuple[Profile, ...] = field(default=(), repr=False)
    # when set to (a, b), evaluation reads the potential at time a + b - t
    reverse_window: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")

    def values(self, x, t: float) -> np.ndarray:
        """Vectorized evaluation at positions x and a single time t."""
        if self.reverse_window is not None:
            a, b = self.reverse_window
            t = a + b - t
        x = np.asarray(x, dtype=float)
        if self.kind == "free":
            return np.zeros_like(x)
        if self.kind == "harmonic":
            return x * x - self.energy_shift
        if self.kind == "gaussian_case":
            s2 = 1.0 + t * t
            return x * x / (2.0 * s2 * s2) - 1.0 / s2
        if self.kind == "nodal_case":
            s2 = 1.0 + t * t
            return x * x / (2.0 * s2 * s2) - 3.0 / s2
        if self.kind == "centrifugal":
            if self.gamma == 0.0:
                return x * x - self.energy_shift
            inv = np.where(x == 0.0, np.inf, 2.0 * self.gamma / np.where(x == 0.0, 1.0, x * x))
            return x * x + inv - self.energy_shift
        if self.kind == "moving_node":
            return self._moving_node(x, t)
        if self.kind == "tabulated":
            return self._tabulated(x, t)
        raise AssertionError(self.kind)

    def _moving_node(self, x: np.ndarray, t: float) -> np.ndarray:
        # Potential generated by the time-shifted quartic-bracket density:
        # with s the time since the nodal instant and
        # w = x^4/4 - x^2 s^2 + s^2 (1+s^2), the potential is
        # x^2/(4(1+s^2)^2) - 1/(2(1+s^2)) - x w_x/(2 w (1+s^2))
        #   + w_xx/(2 w) - w_x^2/(4 w^2).
        # w > 0 everywhere except (x, s) = (0, 0), where the value is +inf.
        s = t - self.alpha
        s2 = s * s
        one = 1.0 + s2
        w = 0.25 * x**4 - x * x * s2 + s2 * one
        wx = x**3 - 2.0 * x * s2
        wxx = 3.0 * x * x - 2.0 * s2
        out = np.full(np.shape(x), np.inf)
        ok = w > 0.0
        xv, wv, wxv, wxxv = x[ok], w[ok], wx[ok], wxx[ok]
        out[ok] = (
            xv * xv / (4.0 * one * one)
            - 0.5 / one
            - xv * wxv / (2.0 * wv * one)
            + wxxv / (2.0 * wv)
            - wxv * wxv / (4.0 * wv * wv)
        )
        return out

    def _tabulated(self, x: np.ndarray, t: float) -> np.ndarray:
        times = np.array([p.time for p in self.profiles])
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise ValueError(f"t={t} outside tabulated window [{times[0]}, {times[-1]}]")
        j = int(np.searchsorted(times, t, side="right"))
        j = min(max(j, 1), len(times) - 1)
        t0, t1 = times[j - 1], times[j]
        lam = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        g = self.profiles[0].grid
        v0 = np.interp(x, g.nodes, self.profiles[j - 1].values)
        v1 = np.interp(x, g.nodes, self.profiles[j].values)
        return (1.0 - lam) * v0 + lam * v1

    def is_singular_at(self, x: float, t: float) -> bool:
        return not math.isfinite(float(self.values(np.array([x]), t)[0]))

    def max_abs_on(self, grid: Grid, times) -> float:
        """max |c| over grid nodes at the given times; inf if singular there."""
        worst = 0.0
        for t in np.atleast_1d(times):
            v = self.values(grid.nodes, float(t))
            worst = max(worst, float(np.max(np.abs(v))))
        return worst


def free_potential() -> PotentialSpec:
    return PotentialSpec("free", lower_bound=0.0)


def harmonic_potential() -> PotentialSpec:
    # x^2 with the ground eigenvalue 1 subtracted.
    return PotentialSpec("harmonic", energy_shift=1.0, lower_bound=-1.0)


def gaussian_case_potential() -> PotentialSpec:
    """Potential of the spreading-Gaussian interpolation case."""
    return PotentialSpec("gaussian_case", lower_bound=-1.0)


def nodal_case_potential() -> PotentialSpec:
    """Potential of the stable-node interpolation case (smooth on the whole line)."""
    return PotentialSpec("nodal_case", lower_bound=-3.0)


def centrifugal_energy(gamma: float, n: int = 0) -> float:
    """n-th eigenvalue of -Lap + x^2 + 2*gamma/x^2 on a half-line."""
    return 4.0 * n + 2.0 + math.sqrt(1.0 + 8.0 * gamma)


def centrifugal_potential(gamma: float, energy_shift: float | None = None) -> PotentialSpec:
    """x^2 + 2*gamma/x^2, renormalized by the half-line ground eigenvalue.

    gamma must exceed -1/8 for the eigenvalue formula to make sense; negative
    gamma makes the potential unbounded below near 0 and is rejected here
    (kernels for unbounded-below potentials are out of scope).
    """
    if gamma <= -0.125:
        raise ValueError(f"gamma={gamma} must exceed -1/8")
    if gamma < 0.0:
        raise ValueError(f"gamma={gamma} < 0 makes the potential unbounded below")
    shift = centrifugal_energy(gamma) if energy_shift is None else float(energy_shift)
    if gamma == 0.0:
        lower = -shift
        singular: tuple[float, ...] = ()
    else:
        # minimum of x^2 + 2 gamma / x^2 at x^4 = 2 gamma
        lower = 2.0 * math.sqrt(2.0 * gamma) - shift
        singular = (0.0,)
    return PotentialSpec("centrifugal", gamma=float(gamma), energy_shift=shift,
                         lower_bound=lower, singular_set=singular)


def moving_node_potential(alpha: float) -> PotentialSpec:
    # Lower bound -5/2 verified by scanning (x, s) in tests; singular only at
    # x = 0 at the nodal instant t = alpha.
    return PotentialSpec("moving_node", alpha=float(alpha), energy_shift=2.5,
                         lower_bound=-2.5, singular_set=(0.0,))


def time_reversed(spec: PotentialSpec, a: float, b: float) -> PotentialSpec:
    """Spec whose value at time t is the original's at a + b - t."""
    import dataclasses

    return dataclasses.replace(spec, reverse_window=(float(a), float(b)))


def tabulated_potential(profiles) -> PotentialSpec:
    profs = tuple(profiles)
    if len(profs) < 2:
        raise ValueError("need at least two time slices")
    times = [p.time for p in profs]
    if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
        raise ValueError("slice times must be strictly increasing")
    g = profs[0].grid
    if any(p.grid != g for p in profs):
        raise ValueError("all slices must share one grid")
    lo = min(float(np.min(p.values)) for p in profs)
    return PotentialSpec("tabulated", profiles=profs, lower_bound=lo)


def evaluate_potential(spec: PotentialSpec, x: float, t: float) -> float:
    """Scalar evaluation; +inf at singular points, never NaN."""
    return float(spec.values(np.array([float(x)]), float(t))[0])


def _second_derivative(v: np.ndarray, h: float) -> np.ndarray:
    """Second derivative, O(h^2): central inside, one-sided 4-point at the ends."""
    d2 = np.empty_like(v)
    d2[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    d2[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / (h * h)
    d2[-1] = (2.0 * v[-1] - 5.0 * v[-2] + 4.0 * v[-3] - v[-4]) / (h * h)
    return d2


def _first_derivative(v: np.ndarray, h: float) -> np.ndarray:
    """First derivative, O(h^2): central inside, one-sided 3-point at the ends."""
    d1 = np.empty_like(v)
    d1[1:-1] = (v[2:] - v[:-2]) / (2.0 * h)
    d1[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
    d1[-1] = (3.0 * v[-1] - 4.0 * v[-2] + v[-3]) / (2.0 * h)
    return d1


def quantum_potential_from_density(rho: Profile) -> Profile:
    """Finite-difference (Lap sqrt(rho)) / sqrt(rho), invariant under scaling.

    The density must be strictly positive on the grid interior; split the
    domain at interior zeros and call per component instead of feeding a
    nodal density through this.
    """
    if np.any(rho.values[1:-1] <= 0.0):
        raise ValueError("density has an interior zero; split the domain at the node")
    if rho.values[0] < 0.0 or rho.values[-1] < 0.0:
        raise ValueError("density must be nonnegative")
    root = np.sqrt(np.maximum(rho.values, 0.0))
    d2 = _second_derivative(root, rho.grid.h)
    if root[0] == 0.0 or root[-1] == 0.0:
        raise ValueError("density vanishes at an endpoint; shrink the domain")
    return Profile(rho.grid, d2 / root, rho.time)


def potential_from_drift(b: Profile, dt_log_g: Profile | float = 0.0) -> Profile:
    """Recover the generating potential from a drift slice.

    For drift b = 2 (ln g)' of a backward factor g, the potential equals
    dt(ln g) + (b^2/2 + b')/2; the caller supplies the time derivative of
    ln g (a profile, or 0.0 for a stationary factor).
    """
    db = _first_derivative(b.values, b.grid.h)
    if isinstance(dt_log_g, Profile):
        if dt_log_g.grid != b.grid:
            raise ValueError("profiles live on different grids")
        extra = dt_log_g.values
    else:
        extra = float(dt_log_g)
    c = extra + 0.5 * (0.5 * b.values * b.values + db)
    return Profile(b.grid, c, b.time)
