"""Path sampling for the interpolating diffusion dX = b dt + sqrt(2) dW.

The drift comes in as profiles tagged with slice times; between slices it is
interpolated linearly in time and linearly in space.  Euler-Maruyama with a
fixed step walks every path at once (one normal block per step, so a fixed
seed fixes the whole ensemble).  Two safety rails:

  * paths leaving the requested domain are clamped to the boundary and
    frozen, with the absorbing step recorded;
  * when a guard node is set (an interior point the true process cannot
    cross), proposals that cross it or land too close are re-integrated on a
    recursively halved step; a path that still cannot clear the guard after
    max_bisect_depth halvings is flagged and frozen where it stood.

Flagged and absorbed paths are excluded from density and moment statistics.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bridge import TransitionDensity
from .grids import Grid, Profile, integrate

__all__ = [
    "PathEnsemble",
    "simulate_paths",
    "empirical_density",
    "PointMoments",
    "moments_from_paths",
    "TransitionMoments",
    "moments_from_transitions",
    "save_ensemble",
    "load_ensemble",
    "write_slice_stats_csv",
]

_ENS_MAGIC = b"FKE1"
_ENS_HEADER = struct.Struct("<4sqqqqdd")
_KDE_CHUNK = 8192

_OK, _ABSORBED, _FLAGGED = 0, 1, 2


@dataclass(eq=False)
class PathEnsemble:
    """Positions of every path at the requested record times.

    positions[p, r] is path p at times[r]; record_steps[r] is the integrator
    step count at that time.  absorbed_step / flagged_step hold the step at
    which a path was frozen, -1 if it never was.  A frozen path keeps its
    freezing position in all later records.
    """

    times: np.ndarray
    record_steps: np.ndarray
    positions: np.ndarray
    absorbed_step: np.ndarray
    flagged_step: np.ndarray
    n_steps: int
    t0: float
    t1: float
    seed: int

    @property
    def n_paths(self) -> int:
        return self.positions.shape[0]

    @property
    def n_absorbed(self) -> int:
        return int(np.sum(self.absorbed_step >= 0))

    @property
    def n_flagged(self) -> int:
        return int(np.sum(self.flagged_step >= 0))

    def valid_at(self, r: int) -> np.ndarray:
        """Paths still live (not absorbed, not flagged) at record index r."""
        k = self.record_steps[r]
        ok_a = (self.absorbed_step < 0) | (self.absorbed_step > k)
        ok_f = (self.flagged_step < 0) | (self.flagged_step > k)
        return ok_a & ok_f

    def samples_at(self, r: int) -> np.ndarray:
        return self.positions[self.valid_at(r), r].astype(float)


def _interp_drift(table: np.ndarray, times: np.ndarray, nodes: np.ndarray,
                  t: float, x: np.ndarray) -> np.ndarray:
    if len(times) == 1:
        row = table[0]
    else:
        t = min(max(t, times[0]), times[-1])
        j = int(np.searchsorted(times, t, side="right")) - 1
        j = min(max(j, 0), len(times) - 2)
        lam = (t - times[j]) / (times[j + 1] - times[j])
        row = (1.0 - lam) * table[j] + lam * table[j + 1]
    return np.interp(x, nodes, row)


def _sample_density(rho: Profile, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from a profile, exact for its trapezoid density."""
    v = rho.values
    if np.any(v < 0.0):
        raise ValueError("initial density has negative entries")
    x = rho.grid.nodes
    h = rho.grid.h
    seg = 0.5 * h * (v[:-1] + v[1:])
    cdf = np.concatenate(([0.0], np.cumsum(seg)))
    total = cdf[-1]
    if total <= 0.0:
        raise ValueError("initial density has no mass")
    cdf /= total
    u = rng.random(n)
    i = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(seg) - 1)
    target = (u - cdf[i]) * total
    a = (v[i + 1] - v[i]) / (2.0 * h)
    b = v[i]
    s = np.empty(n)
    flat = np.abs(a) * h < 1e-14 * np.maximum(b, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_flat = target / np.where(b > 0.0, b, np.inf)
        disc = np.maximum(b * b + 4.0 * a * target, 0.0)
        s_quad = (np.sqrt(disc) - b) / (2.0 * np.where(a != 0.0, a, np.inf))
    s = np.where(flat, s_flat, s_quad)
    s = np.clip(np.where(np.isfinite(s), s, 0.5 * h), 0.0, h)
    return x[i] + s


def simulate_paths(
    drifts: Sequence[Profile],
    n_paths: int,
    seed: int,
    *,
    x_init: float | None = None,
    rho_init: Profile | None = None,
    n_steps: int | None = None,
    record_times: Sequence[float] | None = None,
    domain: tuple[float, float] | None = None,
    node: float | None = None,
    node_halfwidth: float | None = None,
    max_bisect_depth: int = 20,
) -> PathEnsemble:
    """Integrate the ensemble from t0 = drifts[0].time to t1 = drifts[-1].time.

    Exactly one of x_init / rho_init selects the start.  Record times must
    land on the step lattice.  The step count must keep dt <= (t1 - t0)/100.
    """
    if not drifts:
        raise ValueError("need at least one drift profile")
    grid = drifts[0].grid
    dtimes = np.array([p.time for p in drifts])
    for p in drifts:
        if p.grid != grid:
            raise ValueError("drift profiles must share one grid")
    if len(dtimes) > 1 and np.any(np.diff(dtimes) <= 0.0):
        raise ValueError("drift profiles must have strictly increasing times")
    if len(dtimes) == 1:
        raise ValueError("need drift at two or more times to set the horizon")
    table = np.vstack([p.values for p in drifts])
    t0 = float(dtimes[0])
    t1 = float(dtimes[-1])
    horizon = t1 - t0

    if n_steps is None:
        n_steps = max(100, int(math.ceil(400.0 * horizon)))
    if n_steps < 100:
        raise ValueError("n_steps below 100: dt must be at most (t1 - t0)/100")
    dt = horizon / n_steps
    root = math.sqrt(2.0 * dt)

    if (x_init is None) == (rho_init is None):
        raise ValueError("give exactly one of x_init or rho_init")
    if n_paths < 2:
        raise ValueError("need at least two paths")

    lo, hi = domain if domain is not None else (grid.x_min, grid.x_max)
    if not lo < hi:
        raise ValueError("empty domain")
    delta = 0.0
    if node is not None:
        if not (lo < node < hi):
            raise ValueError("guard node must be inside the domain")
        delta = node_halfwidth if node_halfwidth is not None else 2.0 * grid.h

    if record_times is None:
        record_times = [float(t) for t in dtimes]
    rec = np.asarray(record_times, dtype=float)
    if rec.size == 0 or np.any(np.diff(rec) <= 0.0):
        raise ValueError("record times must be strictly increasing and nonempty")
    rec_steps = np.empty(rec.size, dtype=np.int64)
    for r, tr in enumerate(rec):
        k = round((tr - t0) / dt)
        if k < 0 or k > n_steps or abs(t0 + k * dt - tr) > 1e-9 * max(1.0, abs(tr)):
            raise ValueError(f"record time {tr} is not on the step lattice")
        rec_steps[r] = k

    rng = np.random.default_rng(seed)
    if x_init is not None:
        if not (lo < x_init < hi):
            raise ValueError("x_init outside the domain")
        if node is not None and abs(x_init - node) < delta:
            raise ValueError("x_init inside the guard band around the node")
        X = np.full(n_paths, float(x_init))
    else:
        X = _sample_density(rho_init, n_paths, rng)
        X = np.clip(X, np.nextafter(lo, hi), np.nextafter(hi, lo))
        if node is not None:
            for _ in range(1000):
                bad = np.abs(X - node) < delta
                if not np.any(bad):
                    break
                X[bad] = _sample_density(rho_init, int(bad.sum()), rng)
            else:
                raise ValueError("could not draw initial points clear of the node")

    absorbed_step = np.full(n_paths, -1, dtype=np.int64)
    flagged_step = np.full(n_paths, -1, dtype=np.int64)
    positions = np.empty((n_paths, rec.size))
    rec_lookup = {int(k): r for r, k in enumerate(rec_steps)}
    if 0 in rec_lookup:
        positions[:, rec_lookup[0]] = X

    def drift_at(t: float, x: np.ndarray) -> np.ndarray:
        return _interp_drift(table, dtimes, grid.nodes, t, x)

    def violates(x_from: float, x_to: float) -> bool:
        return (x_from - node) * (x_to - node) <= 0.0 or abs(x_to - node) < delta

    def refine(x: float, t: float, dt_loc: float, depth: int) -> tuple[float, int]:
        b = float(drift_at(t, np.array([x]))[0])
        y = x + b * dt_loc + math.sqrt(2.0 * dt_loc) * rng.standard_normal()
        if y <= lo:
            return lo, _ABSORBED
        if y >= hi:
            return hi, _ABSORBED
        if not violates(x, y):
            return y, _OK
        if depth >= max_bisect_depth:
            return x, _FLAGGED
        xa, st = refine(x, t, 0.5 * dt_loc, depth + 1)
        if st != _OK:
            return xa, st
        return refine(xa, t + 0.5 * dt_loc, 0.5 * dt_loc, depth + 1)

    for step in range(n_steps):
        t = t0 + step * dt
        z = rng.standard_normal(n_paths)
        active = (absorbed_step < 0) & (flagged_step < 0)
        idx = np.flatnonzero(active)
        if idx.size:
            xo = X[idx]
            prop = xo + drift_at(t, xo) * dt + root * z[idx]
            if node is not None:
                viol = ((xo - node) * (prop - node) <= 0.0) | (np.abs(prop - node) < delta)
            else:
                viol = np.zeros(idx.size, dtype=bool)

            plain = ~viol
            pp = prop[plain]
            pidx = idx[plain]
            hit_lo = pp <= lo
            hit_hi = pp >= hi
            pp = np.where(hit_lo, lo, np.where(hit_hi, hi, pp))
            X[pidx] = pp
            hit = hit_lo | hit_hi
            absorbed_step[pidx[hit]] = step + 1

            for i_local in np.flatnonzero(viol):
                i = idx[i_local]
                y, st = refine(float(X[i]), t, dt, 0)
                X[i] = y
                if st == _ABSORBED:
                    absorbed_step[i] = step + 1
                elif st == _FLAGGED:
                    flagged_step[i] = step + 1

        if (step + 1) in rec_lookup:
            positions[:, rec_lookup[step + 1]] = X

    return PathEnsemble(
        times=rec,
        record_steps=rec_steps,
        positions=positions,
        absorbed_step=absorbed_step,
        flagged_step=flagged_step,
        n_steps=n_steps,
        t0=t0,
        t1=t1,
        seed=seed,
    )


def empirical_density(samples: np.ndarray, grid: Grid, time: float,
                      bandwidth: float | None = None) -> Profile:
    """Gaussian kernel density of the samples, renormalized on the grid.

    Default bandwidth is Silverman's rule.  Mass falling outside the grid is
    lost to truncation, so the profile is rescaled to integrate to one.
    """
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(s)):
        raise ValueError("samples must be finite")
    if bandwidth is None:
        std = float(np.std(s, ddof=1))
        q75, q25 = np.percentile(s, [75.0, 25.0])
        iqr = float(q75 - q25)
        sigma = min(std, iqr / 1.34) if iqr > 0.0 else std
        if sigma <= 0.0:
            raise ValueError("degenerate sample: zero spread")
        bandwidth = 0.9 * sigma * s.size ** (-0.2)
    if bandwidth <= 0.0:
        raise ValueError("bandwidth must be positive")

    nodes = grid.nodes
    acc = np.zeros(grid.n)
    inv2 = 1.0 / (2.0 * bandwidth * bandwidth)
    for start in range(0, s.size, _KDE_CHUNK):
        chunk = s[start:start + _KDE_CHUNK]
        d = nodes[None, :] - chunk[:, None]
        acc += np.exp(-d * d * inv2).sum(axis=0)
    vals = acc / (s.size * bandwidth * math.sqrt(2.0 * math.pi))
    prof = Profile(grid, vals, time)
    mass = integrate(prof)
    if mass <= 0.0:
        raise ValueError("all sample mass lies outside the grid")
    return Profile(grid, vals / mass, time)


@dataclass(frozen=True)
class PointMoments:
    """Single-step drift and diffusion read off an ensemble at one lag."""

    drift: float
    drift_se: float
    diffusion: float
    diffusion_se: float
    n_samples: int


def moments_from_paths(samples: np.ndarray, x0: float, delta: float) -> PointMoments:
    """Estimate b(x0) ~ mean(dX)/delta and the diffusion ~ mean(dX^2)/delta."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 2:
        raise ValueError("need at least two samples")
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    d = s - x0
    n = s.size
    m1 = float(np.mean(d))
    m2 = float(np.mean(d * d))
    se1 = float(np.std(d, ddof=1)) / math.sqrt(n)
    se2 = float(np.std(d * d, ddof=1)) / math.sqrt(n)
    return PointMoments(
        drift=m1 / delta,
        drift_se=se1 / delta,
        diffusion=m2 / delta,
        diffusion_se=se2 / delta,
        n_samples=n,
    )


@dataclass(frozen=True)
class TransitionMoments:
    """Short-time moments of transition rows at one launch point.

    Per-lag values sit in the arrays; drift and diffusion are the intercepts
    of a least-squares line in the lag, i.e. the lag -> 0 extrapolation.
    """

    x0: float
    eps: float
    deltas: np.ndarray
    drift_per_delta: np.ndarray
    diffusion_per_delta: np.ndarray
    escape_per_delta: np.ndarray
    drift: float
    diffusion: float


def moments_from_transitions(
    tds: Sequence[TransitionDensity],
    x0: float,
    eps: float,
) -> TransitionMoments:
    """Truncated first and second moments of p(x0, s -> ., s + delta).

    All transitions must launch from the same time and live on one grid;
    their lags must be strictly decreasing and at least three are needed for
    the extrapolation.  eps is the truncation half-width (at least 3 grid
    steps); the escaped fraction is the mass outside [x0 - eps, x0 + eps].
    """
    if len(tds) < 3:
        raise ValueError("need at least three lags for the extrapolation")
    grid = tds[0].grid
    s0 = tds[0].s
    for td in tds:
        if td.grid != grid:
            raise ValueError("transitions must share one grid")
        if abs(td.s - s0) > 1e-12:
            raise ValueError("transitions must launch from one time")
    deltas = np.array([td.t - td.s for td in tds])
    if np.any(np.diff(deltas) >= 0.0):
        raise ValueError("lags must be strictly decreasing")
    if eps < 3.0 * grid.h:
        raise ValueError("eps must be at least three grid steps")
    i0 = grid.index_of(x0)

    w = grid.weights
    dx = grid.nodes - x0
    inside = np.abs(dx) <= eps
    drift_pd = np.empty(len(tds))
    diff_pd = np.empty(len(tds))
    esc_pd = np.empty(len(tds))
    for k, td in enumerate(tds):
        if not td.valid_rows[i0]:
            raise ValueError(f"transition row at x0={x0} is invalid")
        row = td.entries[i0]
        m0 = float(np.sum(w[inside] * row[inside]))
        m1 = float(np.sum(w[inside] * row[inside] * dx[inside]))
        m2 = float(np.sum(w[inside] * row[inside] * dx[inside] ** 2))
        dlt = deltas[k]
        drift_pd[k] = m1 / dlt
        diff_pd[k] = m2 / dlt
        esc_pd[k] = max(0.0, 1.0 - m0)
    cd = np.polyfit(deltas, drift_pd, 1)
    cf = np.polyfit(deltas, diff_pd, 1)
    return TransitionMoments(
        x0=x0,
        eps=eps,
        deltas=deltas,
        drift_per_delta=drift_pd,
        diffusion_per_delta=diff_pd,
        escape_per_delta=esc_pd,
        drift=float(cd[1]),
        diffusion=float(cf[1]),
    )


def save_ensemble(e: PathEnsemble, path: str | Path) -> None:
    """Binary dump: fixed header, record times, steps, float32 positions."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_ENS_HEADER.pack(
            _ENS_MAGIC, e.n_paths, len(e.times), e.n_steps, e.seed, e.t0, e.t1,
        ))
        fh.write(np.ascontiguousarray(e.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(e.record_steps, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(e.positions, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(e.absorbed_step, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(e.flagged_step, dtype="<i8").tobytes())


def load_ensemble(path: str | Path) -> PathEnsemble:
    raw = Path(path).read_bytes()
    if len(raw) < _ENS_HEADER.size:
        raise ValueError("truncated ensemble file")
    magic, n_paths, n_rec, n_steps, seed, t0, t1 = _ENS_HEADER.unpack_from(raw)
    if magic != _ENS_MAGIC:
        raise ValueError("not an ensemble file (bad magic)")
    need = _ENS_HEADER.size + 8 * n_rec + 8 * n_rec + 4 * n_paths * n_rec + 8 * n_paths + 8 * n_paths
    if len(raw) != need:
        raise ValueError(f"ensemble file length {len(raw)}, expected {need}")
    off = _ENS_HEADER.size
    times = np.frombuffer(raw, "<f8", n_rec, off).copy()
    off += 8 * n_rec
    rec_steps = np.frombuffer(raw, "<i8", n_rec, off).copy()
    off += 8 * n_rec
    pos = np.frombuffer(raw, "<f4", n_paths * n_rec, off).astype(float).reshape(n_paths, n_rec)
    off += 4 * n_paths * n_rec
    absorbed = np.frombuffer(raw, "<i8", n_paths, off).copy()
    off += 8 * n_paths
    flagged = np.frombuffer(raw, "<i8", n_paths, off).copy()
    return PathEnsemble(
        times=times,
        record_steps=rec_steps,
        positions=pos,
        absorbed_step=absorbed,
        flagged_step=flagged,
        n_steps=n_steps,
        t0=t0,
        t1=t1,
        seed=seed,
    )


def write_slice_stats_csv(e: PathEnsemble, path: str | Path) -> None:
    """Per-record summary: time, live path count, mean, variance."""
    lines = ["time,n_valid,mean,variance"]
    for r in range(len(e.times)):
        s = e.samples_at(r)
        if s.size >= 2:
            lines.append("%.17g,%d,%.17g,%.17g"
                         % (e.times[r], s.size, s.mean(), s.var(ddof=1)))
        else:
            lines.append("%.17g,%d,nan,nan" % (e.times[r], s.size))
    Path(path).write_text("\n".join(lines) + "\n")
