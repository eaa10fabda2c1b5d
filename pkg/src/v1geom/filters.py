"""Gabor filter bank: analytic evaluation, grid sampling, L2 inner products.

The mother filter is a complex exponential carrier under an isotropic
Gaussian envelope; the bank is generated by planar translations and
rotations.  Filters are complex valued: real and imaginary parts form an
even/odd quadrature pair.  All downstream kernels are built from the L2
geometry of these filters, so the quadrature here is the ground truth the
rest of the package is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GridMismatch, GridTooCoarse, GridTooSmall

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class GaborParams:
    """Wavelength / scale of the bank; normalize_unit rescales filters to unit L2 norm."""

    lam: float
    sigma: float
    normalize_unit: bool = True

    def __post_init__(self):
        if not (self.lam > 0 and self.sigma > 0):
            raise ValueError("lam and sigma must be positive")

    @property
    def sq_norm(self) -> float:
        """Squared L2 norm of one filter under this normalization."""
        return 1.0 if self.normalize_unit else self.sigma**2 * math.pi


@dataclass(frozen=True)
class FeaturePoint:
    """A point (x, y, theta) of the feature space; theta is stored reduced mod 2*pi."""

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta) % TWO_PI)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class RetinalGrid:
    """Uniform rectangular sampling of the retinal plane."""

    u_min: float
    u_max: float
    v_min: float
    v_max: float
    n_u: int
    n_v: int

    def __post_init__(self):
        if self.n_u < 2 or self.n_v < 2:
            raise ValueError("grid needs at least 2 samples per axis")
        if not (math.isfinite(self.u_min) and math.isfinite(self.u_max)
                and math.isfinite(self.v_min) and math.isfinite(self.v_max)):
            raise ValueError("grid extents must be finite")
        if not (self.u_max > self.u_min and self.v_max > self.v_min):
            raise ValueError("grid extents must be increasing")

    @property
    def step_u(self) -> float:
        return (self.u_max - self.u_min) / (self.n_u - 1)

    @property
    def step_v(self) -> float:
        return (self.v_max - self.v_min) / (self.n_v - 1)

    def u_values(self) -> np.ndarray:
        return np.linspace(self.u_min, self.u_max, self.n_u)

    def v_values(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.n_v)

    def mesh(self):
        return np.meshgrid(self.u_values(), self.v_values(), indexing="ij")

    def trapezoid_weights(self) -> np.ndarray:
        """Outer product of 1D trapezoid weights, including the cell area."""
        wu = np.full(self.n_u, self.step_u)
        wu[0] *= 0.5
        wu[-1] *= 0.5
        wv = np.full(self.n_v, self.step_v)
        wv[0] *= 0.5
        wv[-1] *= 0.5
        return np.outer(wu, wv)


@dataclass
class SampledFilter:
    """A filter discretized on a retinal grid, with its cached squared L2 norm."""

    grid: RetinalGrid
    values: np.ndarray
    sq_norm: float = field(default=0.0)

    def quadrature_sq_norm(self) -> float:
        w = self.grid.trapezoid_weights()
        return float(np.sum(w * np.abs(self.values) ** 2))


def gabor_eval(params: GaborParams, p: FeaturePoint, u, v):
    """Evaluate the raw (un-normalized) filter at retinal location(s) (u, v).

    The filter centered at (x, y) with orientation theta is the mother
    filter composed with the inverse rigid motion: the argument is the
    offset (u - x, v - y) rotated back by -theta.  Broadcasts over array
    inputs.  Normalization is applied at sampling time, not here.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    du = u - p.x
    dv = v - p.y
    c, s = math.cos(p.theta), math.sin(p.theta)
    a = c * du + s * dv
    b = -s * du + c * dv
    out = np.exp(1j * TWO_PI * a / params.lam - (a**2 + b**2) / (2.0 * params.sigma**2))
    if out.ndim == 0:
        return complex(out)
    return out


def sample_filter(params: GaborParams, p: FeaturePoint, grid: RetinalGrid) -> SampledFilter:
    """Sample the filter on a grid; trapezoid quadrature gives the cached sq_norm.

    Raises GridTooCoarse when a grid step exceeds lam/8 (carrier aliasing
    guard) and GridTooSmall when the grid misses part of the 4-sigma
    envelope support.  With params.normalize_unit the values are rescaled
    so the quadrature norm is exactly one.
    """
    max_step = params.lam / 8.0
    if grid.step_u > max_step * (1 + 1e-12) or grid.step_v > max_step * (1 + 1e-12):
        raise GridTooCoarse(
            f"grid step ({grid.step_u:.4g}, {grid.step_v:.4g}) exceeds lam/8 = {max_step:.4g}"
        )
    r = 4.0 * params.sigma
    eps = 1e-12 * max(1.0, r)
    if (grid.u_min > p.x - r + eps or grid.u_max < p.x + r - eps
            or grid.v_min > p.y - r + eps or grid.v_max < p.y + r - eps):
        raise GridTooSmall(
            f"grid does not cover the 4-sigma support around ({p.x:.4g}, {p.y:.4g})"
        )
    uu, vv = grid.mesh()
    values = gabor_eval(params, p, uu, vv)
    f = SampledFilter(grid=grid, values=values)
    sq = f.quadrature_sq_norm()
    if params.normalize_unit:
        f.values = f.values / math.sqrt(sq)
        f.sq_norm = 1.0
    else:
        f.sq_norm = sq
    return f


def l2_inner(f: SampledFilter, g: SampledFilter) -> complex:
    """Trapezoid quadrature of f * conj(g); conjugation on the second argument."""
    if f.grid != g.grid:
        raise GridMismatch("filters are sampled on different grids")
    w = f.grid.trapezoid_weights()
    return complex(np.sum(w * f.values * np.conj(g.values)))


def default_grid(params: GaborParams, points, samples_per_wavelength: int = 16,
                 support_sigmas: float = 5.0) -> RetinalGrid:
    """A grid covering the envelopes of filters at all given points.

    Extents pad each center by support_sigmas * sigma (the 4-sigma guard in
    sample_filter plus margin for quadrature tails); the step resolves the
    carrier with at least samples_per_wavelength points per wavelength.
    """
    pts = list(points)
    pad = support_sigmas * params.sigma
    u_min = min(p.x for p in pts) - pad
    u_max = max(p.x for p in pts) + pad
    v_min = min(p.y for p in pts) - pad
    v_max = max(p.y for p in pts) + pad
    step = params.lam / samples_per_wavelength
    n_u = max(2, int(math.ceil((u_max - u_min) / step)) + 1)
    n_v = max(2, int(math.ceil((v_max - v_min) / step)) + 1)
    return RetinalGrid(u_min, u_max, v_min, v_max, n_u, n_v)


def unit_normalized(params: GaborParams) -> GaborParams:
    return params if params.normalize_unit else replace(params, normalize_unit=True)


def filter_to_csv_rows(f: SampledFilter):
    """Yield (u, v, re, im) rows in grid row-major order."""
    us = f.grid.u_values()
    vs = f.grid.v_values()
    for i in range(f.grid.n_u):
        for j in range(f.grid.n_v):
            z = f.values[i, j]
            yield us[i], vs[j], z.real, z.imag


def read_filter_csv(path, grid: RetinalGrid | None = None) -> SampledFilter:
    """Read a (u, v, re, im) CSV produced by filter_to_csv_rows.

    Minimal ingestion path for numerically known banks: the rows must form
    a complete regular grid in row-major order.  If grid is omitted it is
    reconstructed from the coordinate columns.
    """
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.shape[1] != 4:
        raise ValueError("expected 4 columns: u, v, re, im")
    us = np.unique(data[:, 0])
    vs = np.unique(data[:, 1])
    if grid is None:
        grid = RetinalGrid(float(us[0]), float(us[-1]), float(vs[0]), float(vs[-1]),
                           len(us), len(vs))
    if len(us) * len(vs) != data.shape[0]:
        raise ValueError("rows do not form a complete regular grid")
    values = (data[:, 2] + 1j * data[:, 3]).reshape(grid.n_u, grid.n_v)
    f = SampledFilter(grid=grid, values=values)
    f.sq_norm = f.quadrature_sq_norm()
    return f
