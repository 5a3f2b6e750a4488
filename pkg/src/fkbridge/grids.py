"""Uniform spatial grids, time slicing, sampled profiles and quadrature.

Everything downstream (kernels, the factor solver, the simulator) works on
profiles sampled on a shared uniform grid and integrated with the trapezoid
rule, so this module is the single place where grid geometry, weights and
profile (de)serialization are defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "Grid",
    "TimeGrid",
    "Profile",
    "make_uniform_grid",
    "integrate",
    "normalize",
    "l1_distance",
    "profile_to_csv",
    "profile_from_csv",
]


@dataclass(frozen=True)
class Grid:
    """Uniform 1-D grid with n nodes on [x_min, x_max], spacing h."""

    x_min: float
    x_max: float
    n: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max)):
            raise ValueError("grid bounds must be finite")
        if not self.x_max > self.x_min:
            raise ValueError(f"x_max={self.x_max} must exceed x_min={self.x_min}")
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"need an integer node count >= 3, got {self.n}")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.linspace(self.x_min, self.x_max, self.n)
        x.flags.writeable = False
        return x

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights: h at interior nodes, h/2 at the ends."""
        w = np.full(self.n, self.h)
        w[0] = 0.5 * self.h
        w[-1] = 0.5 * self.h
        w.flags.writeable = False
        return w

    def index_of(self, x: float) -> int:
        """Index of the node nearest x; x must lie within h/2 of a node."""
        i = int(round((x - self.x_min) / self.h))
        if i < 0 or i >= self.n or abs(self.nodes[i] - x) > 0.5 * self.h + 1e-12:
            raise ValueError(f"x={x} is not within h/2 of a grid node")
        return i


def make_uniform_grid(x_min: float, x_max: float, n: int) -> Grid:
    return Grid(float(x_min), float(x_max), int(n))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform slice times t0 = tau_0 < ... < tau_{m-1} = t1."""

    t0: float
    t1: float
    m: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t0) and math.isfinite(self.t1)):
            raise ValueError("time bounds must be finite")
        if not self.t1 > self.t0:
            raise ValueError(f"t1={self.t1} must exceed t0={self.t0}")
        if int(self.m) != self.m or self.m < 2:
            raise ValueError(f"need an integer slice count >= 2, got {self.m}")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / (self.m - 1)

    @cached_property
    def times(self) -> np.ndarray:
        t = np.linspace(self.t0, self.t1, self.m)
        t.flags.writeable = False
        return t


@dataclass(frozen=True, eq=False)
class Profile:
    """Real-valued function sampled on a grid's nodes at a fixed time.

    The time tag is mandatory: nothing downstream ever infers it.  Values are
    stored as a read-only float64 copy, so a Profile can be shared freely.
    """

    grid: Grid
    values: np.ndarray
    time: float

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float, copy=True)
        if v.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("profile values must be finite")
        if not math.isfinite(self.time):
            raise ValueError("profile time must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def _same_grid(p: Profile, q: Profile) -> None:
    if p.grid != q.grid:
        raise ValueError("profiles live on different grids")


def integrate(p: Profile) -> float:
    """Trapezoid integral of p over its grid. Exact for affine integrands."""
    return float(p.grid.weights @ p.values)


def normalize(p: Profile) -> Profile:
    """Rescale p to unit mass. Rejects negative entries and non-positive mass."""
    if np.any(p.values < 0.0):
        raise ValueError("cannot normalize a profile with negative entries")
    mass = integrate(p)
    if not mass > 0.0:
        raise ValueError(f"profile mass {mass} is not positive")
    return Profile(p.grid, p.values / mass, p.time)


def l1_distance(p: Profile, q: Profile) -> float:
    """Trapezoid integral of |p - q|; both profiles must share one grid."""
    _same_grid(p, q)
    return float(p.grid.weights @ np.abs(p.values - q.values))


def profile_to_csv(p: Profile, path: str | Path) -> None:
    """Write `# time=...` then an `x,value` table at 17 significant digits."""
    lines = [f"# time={p.time:.17g}", "x,value"]
    for x, v in zip(p.grid.nodes, p.values):
        lines.append(f"{x:.17g},{v:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def profile_from_csv(path: str | Path) -> Profile:
    """Inverse of profile_to_csv. The x column must be a uniform grid."""
    time = None
    xs: list[float] = []
    vs: list[float] = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("time="):
                time = float(body[len("time="):])
            continue
        if line.lower().startswith("x,"):
            continue
        sx, sv = line.split(",")
        xs.append(float(sx))
        vs.append(float(sv))
    if time is None:
        raise ValueError(f"{path}: missing '# time=' comment")
    if len(xs) < 3:
        raise ValueError(f"{path}: need at least 3 rows")
    x = np.asarray(xs)
    steps = np.diff(x)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ValueError(f"{path}: x column is not uniformly spaced")
    grid = Grid(float(x[0]), float(x[-1]), len(x))
    return Profile(grid, np.asarray(vs), time)
