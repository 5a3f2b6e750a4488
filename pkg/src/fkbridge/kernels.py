"""Propagation kernels: closed forms, finite-difference assembly, Monte Carlo.

A kernel matrix K over a grid holds K[i][j] ~ k(y_i, s, x_j, t): row i is the
density at the later time t of a unit point mass started at node i at the
earlier time s, attenuated by the potential along the way.  Free rows
integrate to one; a positive potential drains mass, a negative one adds it.

Three routes are provided and cross-checked against each other in the tests:
closed forms (free and harmonic), Crank-Nicolson propagation of discrete
deltas with Strang splitting for the potential, and Brownian-bridge Monte
Carlo with first-exit killing and exclusion of paths whose accumulated
potential integral overflows.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .grids import Grid, Profile
from .potentials import PotentialSpec

__all__ = [
    "KernelMatrix",
    "McEstimate",
    "heat_kernel",
    "harmonic_kernel",
    "kernel_from_function",
    "assemble_kernel_pde",
    "assemble_kernel_legs",
    "propagate_crank_nicolson",
    "mc_kernel_estimate",
    "chapman_kolmogorov_residual",
    "kernel_row",
    "save_kernel",
    "load_kernel",
]

# paths whose accumulated potential integral exceeds this get weight zero
EXCLUSION_LOG_THRESHOLD = -math.log(1e-300)

_MAGIC = b"FKK1"
_CHUNK = 8192


def heat_kernel(y, x, tau):
    """Free propagator (4 pi tau)^{-1/2} exp(-(x-y)^2 / (4 tau)), tau > 0."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0.0):
        raise ValueError("tau must be positive")
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    d = x - y
    return np.exp(-d * d / (4.0 * tau)) / np.sqrt(4.0 * math.pi * tau)


def harmonic_kernel(y, x, tau):
    """Propagator for the quadratic potential with its ground level removed.

    Evaluated in log space so that large tau neither overflows nor loses the
    long-time limit, which is the product of the ground-state profiles at y
    and x.  Satisfies d_tau k = Lap_x k - (x^2 - 1) k.
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0.0):
        raise ValueError("tau must be positive")
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    e4 = np.exp(-4.0 * tau)
    # coth(2 tau) and 1/sinh(2 tau), both safe for large tau
    coth = 1.0 / np.tanh(2.0 * tau)
    csch = 2.0 * np.exp(-2.0 * tau) / (1.0 - e4)
    log_norm = -0.5 * (math.log(math.pi) + np.log1p(-e4))
    quad = -0.5 * (x * x + y * y) * coth + x * y * csch
    return np.exp(log_norm + quad)


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """Dense kernel over one grid for the time leg s -> t.

    entries[i][j] ~ k(y_i, s, x_j, t).  clamped records the largest negative
    magnitude removed when enforcing positivity (0.0 for closed forms).
    """

    grid: Grid
    s: float
    t: float
    entries: np.ndarray
    clamped: float = 0.0

    def __post_init__(self) -> None:
        e = np.array(self.entries, dtype=float, copy=True)
        n = self.grid.n
        if e.shape != (n, n):
            raise ValueError(f"expected a {n}x{n} matrix, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("kernel entries must be finite")
        if np.any(e < 0.0):
            raise ValueError("kernel entries must be nonnegative")
        if not self.t > self.s:
            raise ValueError(f"need t > s, got s={self.s}, t={self.t}")
        e.flags.writeable = False
        object.__setattr__(self, "entries", e)

    @property
    def tau(self) -> float:
        return self.t - self.s

    def row_integrals(self) -> np.ndarray:
        return self.entries @ self.grid.weights


def kernel_row(k: KernelMatrix, y: float) -> Profile:
    """Row through the source point y, as a profile at the arrival time."""
    i = k.grid.index_of(y)
    return Profile(k.grid, k.entries[i], k.t)


def kernel_from_function(grid: Grid, s: float, t: float, fn) -> KernelMatrix:
    """Sample a closed-form kernel fn(y, x, tau) on the grid."""
    if not t > s:
        raise ValueError(f"need t > s, got s={s}, t={t}")
    ynodes = grid.nodes[:, None]
    xnodes = grid.nodes[None, :]
    return KernelMatrix(grid, s, t, fn(ynodes, xnodes, t - s))


def _cn_step_times(s: float, t: float, n_steps: int) -> np.ndarray:
    dtau = (t - s) / n_steps
    return s + (np.arange(n_steps) + 0.5) * dtau


def propagate_crank_nicolson(
    spec: PotentialSpec,
    grid: Grid,
    values: np.ndarray,
    s: float,
    t: float,
    n_steps: int,
) -> np.ndarray:
    """March node values from s to t under diffusion + potential attenuation.

    Crank-Nicolson for the second-difference Laplacian with homogeneous
    Dirichlet values at the grid ends, Strang-split around the potential
    (half-step attenuation, full diffusion step, half-step attenuation),
    the potential frozen at each step's midpoint time.  Accepts a vector of
    node values or a matrix whose columns are independent initial profiles.

    Rejects potentials that are singular on the grid during the window and
    step counts violating dtau * max|c| <= 1/2.
    """
    if not t > s:
        raise ValueError(f"need t > s, got s={s}, t={t}")
    if n_steps < 1:
        raise ValueError("need at least one step")
    u = np.array(values, dtype=float, copy=True)
    squeeze = u.ndim == 1
    if squeeze:
        u = u[:, None]
    if u.shape[0] != grid.n:
        raise ValueError(f"values must have {grid.n} rows")

    dtau = (t - s) / n_steps
    tmids = _cn_step_times(s, t, n_steps)
    cvals = np.empty((n_steps, grid.n))
    for k, tm in enumerate(tmids):
        cvals[k] = spec.values(grid.nodes, float(tm))
    if not np.all(np.isfinite(cvals)):
        raise ValueError(
            "potential is singular on the grid during this window; "
            "split the domain at the singular point or use the Monte Carlo estimator"
        )
    cmax = float(np.max(np.abs(cvals)))
    if dtau * cmax > 0.5:
        need = int(math.ceil((t - s) * cmax / 0.5))
        raise ValueError(
            f"step count {n_steps} too coarse for this potential: "
            f"dtau*max|c| = {dtau * cmax:.3g} > 0.5 (need n_steps >= {need})"
        )

    h = grid.h
    r = dtau / (2.0 * h * h)
    m = grid.n - 2  # interior unknowns; boundary values pinned at zero
    ab = np.zeros((3, m))
    ab[0, 1:] = -r
    ab[1, :] = 1.0 + 2.0 * r
    ab[2, :-1] = -r

    u[0, :] = 0.0
    u[-1, :] = 0.0
    for k in range(n_steps):
        att = np.exp(-0.5 * dtau * cvals[k])
        u *= att[:, None]
        v = u[1:-1]
        rhs = (1.0 - 2.0 * r) * v + r * (u[:-2] + u[2:])
        u[1:-1] = solve_banded((1, 1), ab, rhs, check_finite=False,
                               overwrite_ab=False, overwrite_b=True)
        u *= att[:, None]
        u[0, :] = 0.0
        u[-1, :] = 0.0
    return u[:, 0] if squeeze else u


def assemble_kernel_pde(
    spec: PotentialSpec,
    grid: Grid,
    s: float,
    t: float,
    n_steps: int,
) -> KernelMatrix:
    """Kernel matrix from propagating every discrete delta (1/h at one node).

    Entries are clamped at zero afterwards; the largest clipped magnitude is
    recorded on the result.
    """
    u0 = np.eye(grid.n) / grid.h
    u = propagate_crank_nicolson(spec, grid, u0, s, t, n_steps)
    # column i of u is the propagated delta from node i; rows index the source
    entries = u.T.copy()
    neg = -float(entries.min()) if entries.min() < 0.0 else 0.0
    if neg > 0.0:
        np.clip(entries, 0.0, None, out=entries)
    return KernelMatrix(grid, s, t, entries, clamped=neg)


def default_step_count(spec: PotentialSpec, grid: Grid, s: float, t: float,
                       per_unit: int = 128) -> int:
    """Step count satisfying the stiffness bound with slack, >= 32."""
    tmids = _cn_step_times(s, t, 16)
    cmax = spec.max_abs_on(grid, tmids)
    if not math.isfinite(cmax):
        raise ValueError(
            "potential is singular on the grid during this window; "
            "split the domain at the singular point or use the Monte Carlo estimator")
    by_accuracy = int(math.ceil(per_unit * (t - s)))
    by_stiffness = int(math.ceil((t - s) * cmax / 0.4))
    return max(32, by_accuracy, by_stiffness)


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo kernel value with its sampling error and exclusion count."""

    mean: float
    std_error: float
    n_paths: int
    n_excluded: int


def mc_kernel_estimate(
    spec: PotentialSpec,
    y: float,
    x: float,
    s: float,
    t: float,
    n_paths: int,
    n_time: int,
    seed: int,
    domain: tuple[float, float] | None = None,
) -> McEstimate:
    """Bridge-sampling estimate of k(y, s, x, t).

    Pinned Brownian bridges (quadratic variation 2 per unit time) connect
    (y, s) to (x, t); each bridge carries weight exp(-sum c * dtau) with the
    potential read at the midpoint of every step in both space and time.
    A path is excluded (weight exactly zero) when it leaves `domain`, crosses
    or touches a singular point of the potential, meets an infinite potential
    value, or its accumulated integral exceeds ln(1/1e-300).  The estimate is
    the free propagator times the mean weight.

    Fixed draw order (path-major) and a single pairwise reduction make the
    result bit-identical for a given (seed, n_paths, n_time) regardless of
    internal chunking or worker settings.
    """
    if not t > s:
        raise ValueError(f"need t > s, got s={s}, t={t}")
    if n_time < 8:
        raise ValueError("need at least 8 time steps")
    if n_paths < 2:
        raise ValueError("need at least 2 paths")
    for point, when in ((y, s), (x, t)):
        if not math.isfinite(point):
            raise ValueError("endpoints must be finite")
    if domain is not None:
        lo, hi = domain
        if not lo < hi:
            raise ValueError("domain must be a nonempty open interval")
        if not (lo < y < hi and lo < x < hi):
            raise ValueError("bridge endpoints must lie strictly inside the domain")
    if any(p == y or p == x for p in spec.singular_set):
        raise ValueError("cannot anchor a bridge on a singular point")

    tau = t - s
    dtau = tau / n_time
    rng = np.random.default_rng(int(seed))
    weights = np.empty(n_paths)
    n_excluded = 0

    # per-step bridge coefficients: mean pull toward x and noise scale
    rem = tau - np.arange(n_time) * dtau
    pull = dtau / rem
    noise = np.sqrt(np.maximum(2.0 * dtau * (rem - dtau) / rem, 0.0))

    for start in range(0, n_paths, _CHUNK):
        m = min(_CHUNK, n_paths - start)
        xi = rng.standard_normal((m, n_time))
        w = np.full(m, float(y))
        acc = np.zeros(m)
        dead = np.zeros(m, dtype=bool)
        for k in range(n_time):
            if k == n_time - 1:
                nxt = np.full(m, float(x))
            else:
                nxt = w + (x - w) * pull[k] + xi[:, k] * noise[k]
            cmid = spec.values(0.5 * (w + nxt), s + (k + 0.5) * dtau)
            acc = acc + cmid * dtau
            if domain is not None:
                dead |= (nxt <= domain[0]) | (nxt >= domain[1])
            for p in spec.singular_set:
                # crossing a non-integrable barrier zeroes the true weight;
                # discrete midpoint sums only reach that limit logarithmically,
                # so the step is excluded outright (sign change or exact hit)
                dead |= (w - p) * (nxt - p) <= 0.0
            w = nxt
        bad = dead | ~(acc <= EXCLUSION_LOG_THRESHOLD)  # catches inf and nan
        vals = np.exp(np.where(bad, 0.0, -acc))
        vals[bad] = 0.0
        weights[start:start + m] = vals
        n_excluded += int(bad.sum())

    free = float(heat_kernel(y, x, tau))
    mean_w = float(np.sum(weights)) / n_paths
    var_w = float(np.sum((weights - mean_w) ** 2)) / (n_paths - 1)
    se = free * math.sqrt(var_w / n_paths)
    return McEstimate(mean=free * mean_w, std_error=se,
                      n_paths=n_paths, n_excluded=n_excluded)


def chapman_kolmogorov_residual(
    k_st: KernelMatrix,
    k_tu: KernelMatrix,
    k_su: KernelMatrix,
    edge_margin: float = 0.0,
) -> float:
    """sup_ij | (K_st o K_tu)[i][j] - K_su[i][j] | with trapezoid composition.

    edge_margin trims that much distance from each grid end before taking the
    sup (rows or columns launched next to an absorbing truncation edge lose
    real mass and are not a semigroup defect).
    """
    g = k_st.grid
    if k_tu.grid != g or k_su.grid != g:
        raise ValueError("kernels live on different grids")
    for a, b, what in ((k_st.t, k_tu.s, "inner times"),
                       (k_st.s, k_su.s, "start times"),
                       (k_tu.t, k_su.t, "end times")):
        if abs(a - b) > 1e-12:
            raise ValueError(f"kernel chain mismatch: {what} {a} vs {b}")
    comp = (k_st.entries * g.weights[None, :]) @ k_tu.entries
    diff = np.abs(comp - k_su.entries)
    if edge_margin > 0.0:
        keep = (g.nodes >= g.x_min + edge_margin) & (g.nodes <= g.x_max - edge_margin)
        if not np.any(keep):
            raise ValueError("edge margin removes every node")
        diff = diff[np.ix_(keep, keep)]
    return float(diff.max())


def save_kernel(k: KernelMatrix, path: str | Path) -> None:
    """Binary dump: magic, grid spec, leg times, then row-major float64."""
    header = struct.pack("<4sddqdd", _MAGIC, k.grid.x_min, k.grid.x_max,
                         k.grid.n, k.s, k.t)
    data = np.ascontiguousarray(k.entries, dtype="<f8").tobytes()
    Path(path).write_bytes(header + data)


def load_kernel(path: str | Path) -> KernelMatrix:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<4sddqdd")
    if len(raw) < head:
        raise ValueError(f"{path}: truncated kernel file")
    magic, x_min, x_max, n, s, t = struct.unpack("<4sddqdd", raw[:head])
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a kernel file (bad magic {magic!r})")
    n = int(n)
    expected = head + 8 * n * n
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated kernel file")
    entries = np.frombuffer(raw[head:], dtype="<f8").reshape(n, n)
    return KernelMatrix(Grid(x_min, x_max, n), s, t, entries)


def assemble_kernel_legs(
    spec: PotentialSpec,
    grid: Grid,
    t0: float,
    t1: float,
    slice_times,
    n_steps: int,
):
    """Full-horizon kernel plus (K(t0,t), K(t,t1)) pairs, one step lattice.

    Every leg uses the shared step (t1 - t0)/n_steps with identical midpoint
    times, so composing a pair with trapezoid weights reproduces the full
    kernel up to rounding: interior trapezoid weights equal the step weight
    and the truncation rows they differ on are identically zero.  Slice times
    must land on the lattice strictly between the endpoints.
    """
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got {t0}, {t1}")
    dtau = (t1 - t0) / n_steps
    full = assemble_kernel_pde(spec, grid, t0, t1, n_steps)
    pairs = []
    for t in sorted(float(t) for t in slice_times):
        k = round((t - t0) / dtau)
        if abs(t0 + k * dtau - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"slice time {t} is not on the step lattice")
        if k < 1 or k > n_steps - 1:
            raise ValueError(f"slice time {t} must be strictly inside ({t0}, {t1})")
        k0t = assemble_kernel_pde(spec, grid, t0, t, k)
        ktT = assemble_kernel_pde(spec, grid, t, t1, n_steps - k)
        pairs.append((t, k0t, ktT))
    return full, pairs
