"""Orientation-map surfaces and their non-differential distance.

An orientation map assigns a preferred angle in [0, pi) to every planar
location; its graph inside the feature space is a surface whose induced
small-scale geometry is anisotropic in a way no smooth metric captures:
displacements along the local preferred direction cost their length, while
transverse displacements cost the square root of it.  This module builds
maps by superposing plane waves with random phases, flows the projected
frame fields to define exponential coordinates, inverts the flow by
shooting, and evaluates the area density that weights the surface measure.

Orientation values live modulo pi, so every pointwise operation goes
through the doubled-angle embedding (cos 2T, sin 2T): interpolating those
components is seam-free, and the per-trajectory sign alignment below is
the only globally consistent way to read the frame as a vector field,
since around a pinwheel the line field has half-integer index and admits
no continuous lift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import LeftDomain, NoConvergence, OnExceptionalSet

PINWHEEL_FRACTION = 0.05


@dataclass(frozen=True)
class Grid2D:
    """Half-open regular sampling of a planar rectangle (same convention as FeatureGrid)."""

    x_min: float
    x_max: float
    step_x: float
    y_min: float
    y_max: float
    step_y: float

    @staticmethod
    def _count(lo, hi, step):
        n = int(round((hi - lo) / step))
        if n < 2:
            raise ValueError("axis needs at least 2 samples")
        return n

    @cached_property
    def nx(self):
        return self._count(self.x_min, self.x_max, self.step_x)

    @cached_property
    def ny(self):
        return self._count(self.y_min, self.y_max, self.step_y)

    @cached_property
    def xs(self):
        return self.x_min + self.step_x * np.arange(self.nx)

    @cached_property
    def ys(self):
        return self.y_min + self.step_y * np.arange(self.ny)

    def cell_area(self) -> float:
        return self.step_x * self.step_y

    def points(self) -> np.ndarray:
        xx, yy = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass(frozen=True)
class ExpCoords:
    """Coefficients (e1, e2) of a target in the exponential chart: e1 along V, e2 along W."""

    e1: float
    e2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.e1, self.e2])


@dataclass
class OrientationMap:
    """A sampled orientation field with its generating complex field.

    theta_values holds the preferred angle in [0, pi) at each node; field
    holds the complex plane-wave superposition whose zeros are the
    pinwheels (the exceptional set of the measure construction).
    """

    grid: Grid2D
    theta_values: np.ndarray
    field: np.ndarray
    rng_seed: int | None = None

    @cached_property
    def _doubled(self):
        phase = 2.0 * self.theta_values
        return np.cos(phase), np.sin(phase)

    @cached_property
    def pinwheel_mask(self) -> np.ndarray:
        mag = np.abs(self.field)
        return mag < PINWHEEL_FRACTION * mag.max()

    @property
    def pinwheel_set(self):
        """List of flagged (i, j) grid cells."""
        return [tuple(ij) for ij in np.argwhere(self.pinwheel_mask)]

    def theta_at(self, pts) -> np.ndarray:
        """Seam-free orientation at arbitrary points, reduced to [0, pi)."""
        c2, s2 = self._doubled
        cv = _bilinear(self.grid, c2, pts)
        sv = _bilinear(self.grid, s2, pts)
        return (0.5 * np.arctan2(sv, cv)) % math.pi


def generate_map(extents, steps, n_waves: int = 30, wavenumber: float = 2 * math.pi / 0.8,
                 seed: int = 0) -> OrientationMap:
    """Superpose n_waves plane waves with equally spaced directions and random phases.

    extents is (x_min, x_max, y_min, y_max); steps a scalar or (step_x,
    step_y).  Wave j has direction angle j*pi/n and a phase drawn
    uniformly from [0, 2*pi) by the seeded generator, so a fixed seed
    reproduces the map bit for bit.  The orientation is half the argument
    of the field; nodes where the field magnitude drops below 5% of its
    maximum are flagged as pinwheel cells.
    """
    if n_waves < 1:
        raise ValueError("n_waves must be >= 1")
    if not wavenumber > 0:
        raise ValueError("wavenumber must be positive")
    x_min, x_max, y_min, y_max = extents
    step_x, step_y = (steps, steps) if np.isscalar(steps) else steps
    grid = Grid2D(x_min, x_max, step_x, y_min, y_max, step_y)
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_waves)
    xx, yy = np.meshgrid(grid.xs, grid.ys, indexing="ij")
    z = np.zeros((grid.nx, grid.ny), dtype=complex)
    for j in range(1, n_waves + 1):
        alpha = j * math.pi / n_waves
        carrier = wavenumber * (math.cos(alpha) * xx + math.sin(alpha) * yy)
        z += np.exp(1j * (carrier + phases[j - 1]))
    theta = (np.angle(z) / 2.0) % math.pi
    return OrientationMap(grid=grid, theta_values=theta, field=z, rng_seed=seed)


def constant_map(theta0: float, extents, steps) -> OrientationMap:
    """Map with a uniform orientation; the analytic control case of the tests."""
    x_min, x_max, y_min, y_max = extents
    step_x, step_y = (steps, steps) if np.isscalar(steps) else steps
    grid = Grid2D(x_min, x_max, step_x, y_min, y_max, step_y)
    th = float(theta0) % math.pi
    theta = np.full((grid.nx, grid.ny), th)
    field = np.full((grid.nx, grid.ny), np.exp(2j * th))
    return OrientationMap(grid=grid, theta_values=theta, field=field, rng_seed=None)


def winding_numbers(omap: OrientationMap) -> np.ndarray:
    """Winding of the field argument around each plaquette ((nx-1, ny-1) ints).

    Nonzero entries locate zeros of the complex field; this counts
    pinwheels independently of the magnitude threshold and serves as the
    oracle for the pinwheel density checks.
    """
    ph = np.angle(omap.field)

    def across(p, q):
        return (q - p + math.pi) % (2.0 * math.pi) - math.pi

    d1 = across(ph[:-1, :-1], ph[1:, :-1])
    d2 = across(ph[1:, :-1], ph[1:, 1:])
    d3 = across(ph[1:, 1:], ph[:-1, 1:])
    d4 = across(ph[:-1, 1:], ph[:-1, :-1])
    total = d1 + d2 + d3 + d4
    return np.rint(total / (2.0 * math.pi)).astype(int)


def _bilinear(grid: Grid2D, values: np.ndarray, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    fx = (pts[:, 0] - grid.x_min) / grid.step_x
    fy = (pts[:, 1] - grid.y_min) / grid.step_y
    ix = np.clip(np.floor(fx).astype(int), 0, grid.nx - 2)
    iy = np.clip(np.floor(fy).astype(int), 0, grid.ny - 2)
    tx = np.clip(fx - ix, 0.0, 1.0)
    ty = np.clip(fy - iy, 0.0, 1.0)
    v00 = values[ix, iy]
    v10 = values[ix + 1, iy]
    v01 = values[ix, iy + 1]
    v11 = values[ix + 1, iy + 1]
    return ((1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10
            + (1 - tx) * ty * v01 + tx * ty * v11)


def _inside(grid: Grid2D, pts) -> np.ndarray:
    tol = 1e-12
    return ((pts[:, 0] >= grid.xs[0] - tol) & (pts[:, 0] <= grid.xs[-1] + tol)
            & (pts[:, 1] >= grid.ys[0] - tol) & (pts[:, 1] <= grid.ys[-1] + tol))


def frame_at(omap: OrientationMap, pts, ref_v: np.ndarray | None = None):
    """Orthonormal frame (V, W) at points, optionally sign-aligned to ref_v.

    V points along the local preferred direction, W across it.  The pair
    flips together: aligning V's sign with a reference keeps the frame
    continuous along a trajectory.
    """
    th = _interp_theta_raw(omap, pts)
    v = np.column_stack([-np.sin(th), np.cos(th)])
    w = np.column_stack([np.cos(th), np.sin(th)])
    if ref_v is not None:
        flip = np.sum(v * ref_v, axis=1) < 0.0
        v[flip] *= -1.0
        w[flip] *= -1.0
    return v, w


def _interp_theta_raw(omap: OrientationMap, pts) -> np.ndarray:
    c2, s2 = omap._doubled
    cv = _bilinear(omap.grid, c2, pts)
    sv = _bilinear(omap.grid, s2, pts)
    return 0.5 * np.arctan2(sv, cv)


def exp_map(omap: OrientationMap, xi0, coords, n_steps: int = 64, on_exit: str = "raise"):
    """Time-1 flow of the frame field e1*V + e2*W from xi0.

    coords may be an ExpCoords, a length-2 array, or an (N, 2) batch; xi0
    is a single start point or an (N, 2) batch of per-trajectory starts.
    Fixed-step fourth-order integration (at least 64 steps) keeps results
    reproducible bit for bit.  The frame sign follows the trajectory
    continuously, seeded by the frame at the start point.  Trajectories
    leaving the map domain raise LeftDomain, or become NaN rows with
    on_exit="nan".
    """
    if n_steps < 64:
        n_steps = 64
    single, vs = _coerce_coords(coords)
    xi0 = np.asarray(xi0, dtype=float)
    n = vs.shape[0]
    pos = np.tile(xi0, (n, 1)) if xi0.ndim == 1 else np.array(xi0, dtype=float)
    if pos.shape != vs.shape:
        raise ValueError("xi0 batch must match coords batch")
    v_ref, _ = frame_at(omap, pos)
    ok = np.ones(n, dtype=bool)
    h = 1.0 / n_steps

    def rhs(p, ref):
        v, w = frame_at(omap, p, ref)
        return vs[:, :1] * v + vs[:, 1:] * w

    for _ in range(n_steps):
        k1 = rhs(pos, v_ref)
        k2 = rhs(pos + 0.5 * h * k1, v_ref)
        k3 = rhs(pos + 0.5 * h * k2, v_ref)
        k4 = rhs(pos + h * k3, v_ref)
        pos = pos + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        ok &= _inside(omap.grid, pos)
        v_ref, _ = frame_at(omap, pos, v_ref)
    if not ok.all():
        if on_exit == "raise":
            raise LeftDomain(f"{int((~ok).sum())} trajectories left the map domain")
        pos[~ok] = np.nan
    return pos[0] if single else pos


def _coerce_coords(coords):
    if isinstance(coords, ExpCoords):
        return True, coords.as_array()[None, :]
    arr = np.asarray(coords, dtype=float)
    if arr.ndim == 1:
        return True, arr[None, :]
    return False, arr


def log_map(omap: OrientationMap, xi0, xi1, tol: float = 1e-8, max_iter: int = 50,
            n_steps: int = 64, on_fail: str = "raise"):
    """Invert the exponential map by damped Newton shooting.

    Returns the coordinates v with exp_map(xi0, v) within tol of xi1.  The
    initial guess reads the offset in the frame at xi0; the Jacobian is
    finite-differenced through the integrator.  Rows that have not
    converged after max_iter iterations raise NoConvergence, or are
    returned as NaN with on_fail="nan".  Scalar targets return ExpCoords.
    """
    xi0 = np.asarray(xi0, dtype=float)
    single = np.asarray(xi1, dtype=float).ndim == 1
    targets = np.atleast_2d(np.asarray(xi1, dtype=float))
    n = targets.shape[0]
    starts = np.tile(xi0, (n, 1)) if xi0.ndim == 1 else np.array(xi0, dtype=float)
    if starts.shape != targets.shape:
        raise ValueError("xi0 batch must match xi1 batch")

    v0, w0 = frame_at(omap, starts)
    offs = targets - starts
    v = np.column_stack([np.sum(offs * v0, axis=1), np.sum(offs * w0, axis=1)])

    def shoot(vals, starts_sub):
        return exp_map(omap, starts_sub, vals, n_steps=n_steps, on_exit="nan")

    res = shoot(v, starts) - targets
    err = np.linalg.norm(res, axis=1)
    active = ~(err <= tol)
    active &= np.isfinite(err)
    failed = ~np.isfinite(err)

    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        va = v[idx]
        sa = starts[idx]
        delta = 1e-6 * np.maximum(1.0, np.abs(va).max(axis=1))[:, None]
        probe = np.concatenate([va, va + delta * [[1.0, 0.0]], va + delta * [[0.0, 1.0]]])
        out = shoot(probe, np.tile(sa, (3, 1)))
        m = len(idx)
        f0, f1, f2 = out[:m], out[m:2 * m], out[2 * m:]
        j1 = (f1 - f0) / delta
        j2 = (f2 - f0) / delta
        det = j1[:, 0] * j2[:, 1] - j1[:, 1] * j2[:, 0]
        bad = ~np.isfinite(det) | (np.abs(det) < 1e-14)
        det = np.where(bad, 1.0, det)
        r = f0 - targets[idx]
        step1 = (j2[:, 1] * r[:, 0] - j2[:, 0] * r[:, 1]) / det
        step2 = (-j1[:, 1] * r[:, 0] + j1[:, 0] * r[:, 1]) / det
        step = np.column_stack([step1, step2])
        step[bad] = np.nan

        base_err = np.linalg.norm(r, axis=1)
        alpha = np.ones(m)
        new_v = va.copy()
        new_err = base_err.copy()
        seeking = ~bad
        for _ in range(4):
            if not seeking.any():
                break
            rows = np.nonzero(seeking)[0]
            cand = va[rows] - alpha[rows, None] * step[rows]
            cerr = np.linalg.norm(shoot(cand, sa[rows]) - targets[idx][rows], axis=1)
            accepted = (cerr < base_err[rows]) & np.isfinite(cerr)
            new_v[rows[accepted]] = cand[accepted]
            new_err[rows[accepted]] = cerr[accepted]
            seeking[rows[accepted]] = False
            alpha[rows[~accepted]] *= 0.5
        stalled = seeking | bad
        v[idx] = new_v
        err[idx] = new_err
        done = new_err <= tol
        active[idx[done]] = False
        newly_failed = idx[stalled & ~done]
        active[newly_failed] = False
        failed[newly_failed] = True

    failed |= active | ~np.isfinite(err) | (err > tol)
    if failed.any():
        if on_fail == "raise":
            raise NoConvergence(f"{int(failed.sum())} shooting targets did not converge")
        v[failed] = np.nan
    if single:
        return ExpCoords(float(v[0, 0]), float(v[0, 1]))
    return v


def surface_distance(omap: OrientationMap, xi0, xi1, **kw):
    """Distance sqrt(e1^2 + |e2|) in the exponential chart at xi0.

    Quadratic cost along the preferred direction, linear-in-sqrt cost
    across it: the hallmark non-differential scaling of the surface.
    """
    v = log_map(omap, xi0, xi1, **kw)
    if isinstance(v, ExpCoords):
        return math.sqrt(v.e1**2 + abs(v.e2))
    return np.sqrt(v[:, 0] ** 2 + np.abs(v[:, 1]))


def dilate(omap: OrientationMap, xi0, coords, t: float):
    """Anisotropic dilation (e1, e2) -> (t e1, t^2 e2) in the exponential chart."""
    single, vs = _coerce_coords(coords)
    out = np.column_stack([t * vs[:, 0], t * t * vs[:, 1]])
    if single:
        return ExpCoords(float(out[0, 0]), float(out[0, 1]))
    return out


def _density_field(omap: OrientationMap) -> np.ndarray:
    """Node values of |N_h|: horizontal part of the unit normal of the graph.

    The frame (V, W) is orthonormal so the induced surface density is
    |N_h| alone.  Orientation gradients come from central differences of
    the doubled-angle components, which are seam-free; the mod-pi sign
    ambiguity cancels because the directional derivative enters squared.
    """
    c2, s2 = omap._doubled
    gx_c, gy_c = _central_diff(c2, omap.grid.step_x, omap.grid.step_y)
    gx_s, gy_s = _central_diff(s2, omap.grid.step_x, omap.grid.step_y)
    tx = 0.5 * (c2 * gx_s - s2 * gx_c)
    ty = 0.5 * (c2 * gy_s - s2 * gy_c)
    th = omap.theta_values
    directional = tx * np.sin(th) - ty * np.cos(th)
    return np.sqrt(directional**2 + 1.0) / np.sqrt(1.0 + tx**2 + ty**2)


def _central_diff(a: np.ndarray, hx: float, hy: float):
    gx = np.empty_like(a)
    gy = np.empty_like(a)
    gx[1:-1, :] = (a[2:, :] - a[:-2, :]) / (2.0 * hx)
    gx[0, :] = (a[1, :] - a[0, :]) / hx
    gx[-1, :] = (a[-1, :] - a[-2, :]) / hx
    gy[:, 1:-1] = (a[:, 2:] - a[:, :-2]) / (2.0 * hy)
    gy[:, 0] = (a[:, 1] - a[:, 0]) / hy
    gy[:, -1] = (a[:, -1] - a[:, -2]) / hy
    return gx, gy


def area_density(omap: OrientationMap, xi, on_exceptional: str = "raise"):
    """Surface measure density at xi (scalar or (N, 2) batch).

    Values are bilinear in the node field computed by central differences.
    Querying inside a pinwheel cell raises OnExceptionalSet (the map is
    not differentiable there), or yields NaN with on_exceptional="nan".
    """
    if not hasattr(omap, "_density_cache"):
        omap._density_cache = _density_field(omap)
    pts = np.atleast_2d(np.asarray(xi, dtype=float))
    vals = _bilinear(omap.grid, omap._density_cache, pts)
    if omap.pinwheel_mask.any():
        near = _bilinear(omap.grid, omap.pinwheel_mask.astype(float), pts) > 0.0
        if near.any():
            if on_exceptional == "raise":
                raise OnExceptionalSet(f"{int(near.sum())} points touch pinwheel cells")
            vals = np.where(near, np.nan, vals)
    if np.asarray(xi, dtype=float).ndim == 1:
        return float(vals[0])
    return vals


def map_csv_rows(omap: OrientationMap):
    """Yield (x, y, theta) rows in node order."""
    for i, x in enumerate(omap.grid.xs):
        for j, y in enumerate(omap.grid.ys):
            yield x, y, omap.theta_values[i, j]
