"""Metric structure of the Gabor feature space.

The generating kernel is the real part of the L2 inner product between two
filters; the squared distance is 2t - 2K with t the squared filter norm.
The closed form below was checked against the sampling quadrature in
filters.py, which remains the independent oracle for it in the tests.

Pair interactions can be restricted to local patches (truncating the
oscillatory tail of the kernel at its first maximum); chaining local hops
and taking the shortest total length glues the local distances into a
global one, computed here on a regular feature grid by Dijkstra search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra as _dijkstra

from .errors import NodeNotOnGrid
from .filters import FeaturePoint, GaborParams, default_grid, l2_inner, sample_filter

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Reduce an angle (array ok) to (-pi, pi]."""
    return -((-np.asarray(a) + math.pi) % TWO_PI - math.pi)


@dataclass(frozen=True)
class MetricConfig:
    """Kernel/distance configuration: Gabor parameters plus evaluation mode.

    closed_form uses the analytic expression of the inner product (valid
    for the Gabor family only); numeric samples both filters and runs the
    quadrature, which extends to banks only known numerically.
    """

    params: GaborParams
    mode: str = "closed_form"

    def __post_init__(self):
        if self.mode not in ("closed_form", "numeric"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class PatchSpec:
    """Wavelength entering the patch inequality |a(1+cos dth) + b sin dth| < lam."""

    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")


def relative_coords(p: FeaturePoint, p0: FeaturePoint):
    """Offset of p seen from p0's frame: planar offset rotated back by -theta0.

    Returns (a, b, dtheta) with dtheta wrapped to (-pi, pi].  The kernel,
    distance and patch all depend on the pair only through these.
    """
    dx = p.x - p0.x
    dy = p.y - p0.y
    c, s = math.cos(p0.theta), math.sin(p0.theta)
    a = c * dx + s * dy
    b = -s * dx + c * dy
    return a, b, float(wrap_angle(p.theta - p0.theta))


def kernel_rel(params: GaborParams, a, b, dth):
    """Generating kernel as a function of the relative coordinates (array ok)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dth = np.asarray(dth, dtype=float)
    sig2 = params.sigma**2
    lam = params.lam
    cos_dth = np.cos(dth)
    envelope = np.exp(-(a**2 + b**2) / (4.0 * sig2)
                      - 2.0 * sig2 * math.pi**2 * (1.0 - cos_dth) / lam**2)
    carrier = np.cos(math.pi * (a * (1.0 + cos_dth) + b * np.sin(dth)) / lam)
    scale = 1.0 if params.normalize_unit else sig2 * math.pi
    return scale * envelope * carrier


def kernel_closed(cfg: MetricConfig, p: FeaturePoint, p0: FeaturePoint) -> float:
    """Closed-form kernel value K(p, p0)."""
    a, b, dth = relative_coords(p, p0)
    return float(kernel_rel(cfg.params, a, b, dth))


def kernel_numeric(cfg: MetricConfig, p: FeaturePoint, p0: FeaturePoint,
                   grid=None) -> float:
    """Kernel via sampled filters and quadrature (works for any sampled bank)."""
    if grid is None:
        grid = default_grid(cfg.params, [p, p0])
    f = sample_filter(cfg.params, p, grid)
    g = sample_filter(cfg.params, p0, grid)
    return l2_inner(f, g).real


def kernel(cfg: MetricConfig, p: FeaturePoint, p0: FeaturePoint) -> float:
    if cfg.mode == "closed_form":
        return kernel_closed(cfg, p, p0)
    return kernel_numeric(cfg, p, p0)


def distance_rel(params: GaborParams, a, b, dth):
    t = params.sq_norm
    d2 = 2.0 * t - 2.0 * kernel_rel(params, a, b, dth)
    return np.sqrt(np.maximum(d2, 0.0))


def distance(cfg: MetricConfig, p: FeaturePoint, p0: FeaturePoint) -> float:
    """Kernel-induced distance sqrt(max(0, 2t - 2K))."""
    t = cfg.params.sq_norm
    return math.sqrt(max(0.0, 2.0 * t - 2.0 * kernel(cfg, p, p0)))


def kernel_many(params: GaborParams, pts: np.ndarray, p0) -> np.ndarray:
    """Vectorized closed-form kernel from an (N, 3) point array to one point."""
    pts = np.asarray(pts, dtype=float)
    x0, y0, th0 = _point_tuple(p0)
    c, s = math.cos(th0), math.sin(th0)
    dx = pts[:, 0] - x0
    dy = pts[:, 1] - y0
    a = c * dx + s * dy
    b = -s * dx + c * dy
    return kernel_rel(params, a, b, pts[:, 2] - th0)


def distance_many(params: GaborParams, pts: np.ndarray, p0) -> np.ndarray:
    t = params.sq_norm
    return np.sqrt(np.maximum(2.0 * t - 2.0 * kernel_many(params, pts, p0), 0.0))


def _point_tuple(p):
    if isinstance(p, FeaturePoint):
        return p.x, p.y, p.theta
    x0, y0, th0 = p
    return float(x0), float(y0), float(th0)


def patch_arg_rel(a, b, dth):
    return a * (1.0 + np.cos(dth)) + b * np.sin(dth)


def patch_contains(spec: PatchSpec, p: FeaturePoint, p0: FeaturePoint) -> bool:
    """True iff p lies in the local patch around p0.

    The inequality is invariant under swapping p and p0 (the relative
    coordinates negate), so patch membership is symmetric.
    """
    a, b, dth = relative_coords(p, p0)
    return bool(abs(patch_arg_rel(a, b, dth)) < spec.lam)


@dataclass(frozen=True)
class FeatureGrid:
    """Regular half-open sampling of the feature space.

    Axis samples are min + step*(0..n-1) with n = round((max-min)/step);
    the right endpoint is excluded, which makes a full-circle theta axis
    wrap cleanly.  Node order is row-major over (ix, iy, it).
    """

    x_min: float
    x_max: float
    step_x: float
    y_min: float
    y_max: float
    step_y: float
    theta_min: float
    theta_max: float
    step_theta: float

    def __post_init__(self):
        if min(self.step_x, self.step_y, self.step_theta) <= 0:
            raise ValueError("steps must be positive")

    @staticmethod
    def _count(lo, hi, step):
        n = int(round((hi - lo) / step))
        if n < 1:
            raise ValueError("empty axis")
        return n

    @cached_property
    def nx(self):
        return self._count(self.x_min, self.x_max, self.step_x)

    @cached_property
    def ny(self):
        return self._count(self.y_min, self.y_max, self.step_y)

    @cached_property
    def ntheta(self):
        return self._count(self.theta_min, self.theta_max, self.step_theta)

    @cached_property
    def xs(self):
        return self.x_min + self.step_x * np.arange(self.nx)

    @cached_property
    def ys(self):
        return self.y_min + self.step_y * np.arange(self.ny)

    @cached_property
    def thetas(self):
        return self.theta_min + self.step_theta * np.arange(self.ntheta)

    @property
    def theta_wraps(self) -> bool:
        return abs(self.ntheta * self.step_theta - TWO_PI) < 1e-9

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny * self.ntheta

    def node_index(self, ix, iy, it) -> int:
        return (ix * self.ny + iy) * self.ntheta + it

    def node_point(self, idx: int) -> FeaturePoint:
        ix, rest = divmod(idx, self.ny * self.ntheta)
        iy, it = divmod(rest, self.ntheta)
        return FeaturePoint(float(self.xs[ix]), float(self.ys[iy]), float(self.thetas[it]))

    def points(self) -> np.ndarray:
        """(n_nodes, 3) array of node coordinates in row-major order."""
        xx, yy, tt = np.meshgrid(self.xs, self.ys, self.thetas, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel(), tt.ravel()])

    def cell_volume(self) -> float:
        return self.step_x * self.step_y * self.step_theta

    def locate(self, p) -> int:
        """Index of the grid node coinciding with p; NodeNotOnGrid otherwise."""
        x0, y0, th0 = _point_tuple(p)
        ix = int(round((x0 - self.x_min) / self.step_x))
        iy = int(round((y0 - self.y_min) / self.step_y))
        if self.theta_wraps:
            it = int(round(float(wrap_angle(th0 - self.theta_min) % TWO_PI) / self.step_theta)) % self.ntheta
        else:
            it = int(round((th0 - self.theta_min) / self.step_theta))
        if not (0 <= ix < self.nx and 0 <= iy < self.ny and 0 <= it < self.ntheta):
            raise NodeNotOnGrid(f"{(x0, y0, th0)} outside the grid")
        ok_x = abs(self.xs[ix] - x0) <= 1e-9 * max(1.0, self.step_x)
        ok_y = abs(self.ys[iy] - y0) <= 1e-9 * max(1.0, self.step_y)
        dth = wrap_angle(self.thetas[it] - th0) if self.theta_wraps else self.thetas[it] - th0
        ok_t = abs(float(dth)) <= 1e-9 * max(1.0, self.step_theta)
        if not (ok_x and ok_y and ok_t):
            raise NodeNotOnGrid(f"{(x0, y0, th0)} is not a grid node")
        return self.node_index(ix, iy, it)


def metric_ball_radius_xy(params: GaborParams, radius: float) -> float:
    """Planar reach of the d-ball: largest |offset| with d <= radius.

    Follows from bounding both the angular factor and the carrier by one,
    leaving only the Gaussian envelope; infinite when the radius exceeds
    the distance saturation level sqrt(2t).
    """
    t = params.sq_norm
    kmin = t - 0.5 * radius**2
    if kmin <= 0:
        return math.inf
    return 2.0 * params.sigma * math.sqrt(-math.log(kmin / t))


def ball_offset_bounds(params: GaborParams, grid: FeatureGrid, radius: float):
    """Index bounding box of {d <= radius} in relative grid offsets."""
    g = grid
    t = params.sq_norm
    kmin = t - 0.5 * radius**2
    rad_xy = metric_ball_radius_xy(params, radius)
    if math.isinf(rad_xy):
        rad_xy = math.hypot(g.x_max - g.x_min, g.y_max - g.y_min)
        dth_max = math.pi
    else:
        budget = -math.log(kmin / t)
        c = budget * params.lam**2 / (2.0 * params.sigma**2 * math.pi**2)
        dth_max = math.acos(1.0 - c) if c < 2.0 else math.pi
    mx = int(math.floor(rad_xy / g.step_x))
    my = int(math.floor(rad_xy / g.step_y))
    mt = int(math.floor(dth_max / g.step_theta))
    if g.theta_wraps:
        mt = min(mt, g.ntheta // 2)
    else:
        mt = min(mt, g.ntheta - 1)
    return min(mx, g.nx - 1), min(my, g.ny - 1), mt


class GluedDistance:
    """Shortest-path glued distance between nodes of a feature grid.

    Edges join node pairs that lie in each other's patch and are closer
    than the hop radius r_hop; edge weights are the kernel distance.  The
    hop cap keeps discrete chains from exploiting long intra-patch jumps
    that the continuum infimum would refine away.  Queries run Dijkstra
    from the lower-indexed endpoint, so results are exactly symmetric.
    Unreachable pairs return math.inf.
    """

    def __init__(self, cfg: MetricConfig, spec: PatchSpec, grid: FeatureGrid,
                 r_hop: float | None = None, hop_scale: float = 3.0):
        self.cfg = cfg
        self.spec = spec
        self.grid = grid
        self.r_hop = self.default_r_hop(hop_scale) if r_hop is None else float(r_hop)
        self._graph = self._build_graph()
        self._cache: dict[int, np.ndarray] = {}

    def default_r_hop(self, hop_scale: float) -> float:
        """hop_scale times the largest single-axis grid step measured by d.

        Planar steps are measured in the most expensive direction (along
        the carrier axis), so axis neighbors stay connected at every
        orientation of the base point.
        """
        p = self.cfg.params
        steps = [
            float(distance_rel(p, self.grid.step_x, 0.0, 0.0)),
            float(distance_rel(p, self.grid.step_y, 0.0, 0.0)),
            float(distance_rel(p, 0.0, 0.0, self.grid.step_theta)),
        ]
        return hop_scale * max(steps)

    def _offset_bounds(self):
        return ball_offset_bounds(self.cfg.params, self.grid, self.r_hop)

    def _build_graph(self):
        g = self.grid
        params = self.cfg.params
        mx, my, mt = self._offset_bounds()
        dxs = np.arange(-mx, mx + 1) * g.step_x
        dys = np.arange(-my, my + 1) * g.step_y
        dts = np.arange(-mt, mt + 1)
        oxx, oyy, ott = np.meshgrid(dxs, dys, dts, indexing="ij")
        oxx, oyy, ott = oxx.ravel(), oyy.ravel(), ott.ravel()
        dth = ott * g.step_theta

        rows, cols, vals = [], [], []
        iy_all = np.arange(g.ny)
        for kt0 in range(g.ntheta):
            th0 = g.thetas[kt0]
            c, s = math.cos(th0), math.sin(th0)
            a = c * oxx + s * oyy
            b = -s * oxx + c * oyy
            dist = distance_rel(params, a, b, dth)
            inside = (np.abs(patch_arg_rel(a, b, dth)) < self.spec.lam) & (dist <= self.r_hop)
            inside &= ~((oxx == 0) & (oyy == 0) & (ott == 0))
            sel = np.nonzero(inside)[0]
            odx = np.rint(oxx[sel] / g.step_x).astype(np.int64)
            ody = np.rint(oyy[sel] / g.step_y).astype(np.int64)
            odt = ott[sel].astype(np.int64)
            w = dist[sel]
            for k in range(len(sel)):
                ix_lo = max(0, -odx[k])
                ix_hi = min(g.nx, g.nx - odx[k])
                if ix_hi <= ix_lo:
                    continue
                iy_ok = iy_all[(iy_all + ody[k] >= 0) & (iy_all + ody[k] < g.ny)]
                if len(iy_ok) == 0:
                    continue
                kt1 = kt0 + odt[k]
                if g.theta_wraps:
                    kt1 %= g.ntheta
                elif not (0 <= kt1 < g.ntheta):
                    continue
                ixs = np.arange(ix_lo, ix_hi)
                src = (ixs[:, None] * g.ny + iy_ok[None, :]) * g.ntheta + kt0
                dst = ((ixs[:, None] + odx[k]) * g.ny + (iy_ok[None, :] + ody[k])) * g.ntheta + kt1
                rows.append(src.ravel())
                cols.append(dst.ravel())
                vals.append(np.full(src.size, w[k]))
        if rows:
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
        else:
            rows = np.array([], dtype=np.int64)
            cols = np.array([], dtype=np.int64)
            vals = np.array([], dtype=float)
        n = g.n_nodes
        return coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    def from_node(self, idx: int) -> np.ndarray:
        """Glued distances from one node to every node (cached per source)."""
        if idx not in self._cache:
            self._cache[idx] = _dijkstra(self._graph, directed=False, indices=idx)
        return self._cache[idx]

    def between(self, p, p0) -> float:
        i = self.grid.locate(p)
        j = self.grid.locate(p0)
        if i == j:
            return 0.0
        src, dst = (i, j) if i < j else (j, i)
        return float(self.from_node(src)[dst])

    @property
    def n_edges(self) -> int:
        return self._graph.nnz


def glued_distance(cfg: MetricConfig, spec: PatchSpec, grid: FeatureGrid,
                   p, p0, r_hop: float | None = None) -> float:
    """One-shot glued distance between two grid nodes.

    Builds the hop graph on every call; use GluedDistance directly when
    querying many pairs on the same grid.
    """
    return GluedDistance(cfg, spec, grid, r_hop=r_hop).between(p, p0)


@dataclass(frozen=True)
class MetricTensor:
    """Local quadratic form of the squared distance at a base point."""

    g: np.ndarray
    g_inv: np.ndarray
    base: FeaturePoint


def local_metric_tensor(cfg: MetricConfig, p0: FeaturePoint) -> MetricTensor:
    """Second-order tensor g(p0) with d^2(p, p0) ~ (p-p0)^T g (p-p0) locally.

    Scaled by the configured filter norm, so the finite-difference Hessian
    of the configured d^2 equals 2 g(p0) in either normalization mode.
    """
    if cfg.mode != "closed_form":
        raise ValueError("local_metric_tensor requires closed_form mode")
    params = cfg.params
    sig2 = params.sigma**2
    lam2 = params.lam**2
    big = 1.0 / (4.0 * sig2) + 2.0 * math.pi**2 / lam2
    small = 1.0 / (4.0 * sig2)
    ang = sig2 * math.pi**2 / lam2
    c, s = math.cos(p0.theta), math.sin(p0.theta)
    m = np.array([
        [big * c**2 + small * s**2, (big - small) * c * s, 0.0],
        [(big - small) * c * s, big * s**2 + small * c**2, 0.0],
        [0.0, 0.0, ang],
    ])
    g = 2.0 * params.sq_norm * m
    return MetricTensor(g=g, g_inv=np.linalg.inv(g), base=p0)


def metric_determinant(cfg: MetricConfig) -> float:
    """det g, independent of the base point (volume density is constant)."""
    params = cfg.params
    sig2 = params.sigma**2
    lam2 = params.lam**2
    big = 1.0 / (4.0 * sig2) + 2.0 * math.pi**2 / lam2
    small = 1.0 / (4.0 * sig2)
    ang = sig2 * math.pi**2 / lam2
    return (2.0 * params.sq_norm) ** 3 * big * small * ang


def limit_cometric(A: float, theta0: float) -> np.ndarray:
    """Degenerate inverse-metric limit for vanishing wavelength at sigma^2 = A*lam.

    The planar block is the rank-one projector onto the direction
    (-sin theta0, cos theta0); the angular entry stays positive.  The
    limit matrix is not invertible: it encodes a two-dimensional
    horizontal distribution inside the three-dimensional space.

    The overall constant is fixed by exact inversion of the local tensor:
    the 2x2 planar block of g has eigenvalues 2t*C and 2t*D (C, D the
    carrier/envelope curvatures), so the soft eigenvalue of g^-1 tends to
    1/(2*sigma^2*pi*D) = 2A/pi, and the angular entry of g is 2*A*pi^3
    for every lam, giving exactly 1/(2*A*pi^3) = (2A/pi)/(4*pi^2*A^2).
    """
    if not A > 0:
        raise ValueError("A must be positive")
    c, s = math.cos(theta0), math.sin(theta0)
    m = np.array([
        [s**2, -c * s, 0.0],
        [-c * s, c**2, 0.0],
        [0.0, 0.0, 1.0 / (4.0 * math.pi**2 * A**2)],
    ])
    return (2.0 * A / math.pi) * m


def kernel_field(params: GaborParams, grid: FeatureGrid, p0) -> np.ndarray:
    """Closed-form kernel sampled on a feature grid, shaped (nx, ny, ntheta)."""
    vals = kernel_many(params, grid.points(), p0)
    return vals.reshape(grid.nx, grid.ny, grid.ntheta)


def distance_field(params: GaborParams, grid: FeatureGrid, p0) -> np.ndarray:
    t = params.sq_norm
    return np.sqrt(np.maximum(2.0 * t - 2.0 * kernel_field(params, grid, p0), 0.0))


def field_csv_rows(grid: FeatureGrid, values3d: np.ndarray):
    """Yield (x, y, theta, value) rows in node order."""
    pts = grid.points()
    flat = np.asarray(values3d).reshape(-1)
    for k in range(grid.n_nodes):
        yield pts[k, 0], pts[k, 1], pts[k, 2], flat[k]
