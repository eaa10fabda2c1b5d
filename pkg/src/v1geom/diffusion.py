"""Connectivity kernels and heat flow on discretized feature spaces.

Two propagation mechanisms live here.  The first builds a sparse kernel
from sigmoid-activated, unit-normalized kernel values, renormalizes it in
the two-stage density-correcting fashion of diffusion maps, and iterates
the resulting averaging operator from a seed profile.  The second
discretizes the Laplacian on a neighborhood graph over the same nodes and
runs explicit-Euler heat stepping from a Dirac initial datum.  Both spread
activity along the anisotropy of the underlying kernel distance; helpers
at the bottom quantify the spread (orientation of maxima, second moments,
patchiness against an orientation map).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import expit

from .errors import DisconnectedGraph, EmptyRow, UnstableStep, ZeroRowMass
from .filters import GaborParams, unit_normalized
from .metric import FeatureGrid, ball_offset_bounds, kernel_rel, metric_ball_radius_xy
from .surface import Grid2D, OrientationMap


def sigmoid(z):
    """Logistic activation 1 / (1 + exp(-z))."""
    return expit(z)


@dataclass(frozen=True)
class PropagationParams:
    """Iteration count, activation and normalization of the kernel propagation."""

    n_steps: int = 4
    activation: str = "sigmoid"
    threshold: float = 0.1
    alpha: float = 1.0
    Q: object = None  # optional per-node density array

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.activation not in ("sigmoid", "threshold"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class SparseKernel:
    """Row-compressed nonnegative kernel over grid nodes.

    All stored values are strictly positive; the sparsity pattern is
    symmetric whenever the base kernel is (the distance cutoff is).
    """

    n: int
    matrix: csr_matrix
    cutoff: str = ""

    def row(self, i: int):
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[lo:hi], self.matrix.data[lo:hi]

    def row_profile(self, i: int) -> np.ndarray:
        """Dense row i, the activity profile seeded at node i."""
        return np.asarray(self.matrix[i].todense()).ravel()

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def max_row_occupancy(self) -> float:
        counts = np.diff(self.matrix.indptr)
        return float(counts.max()) / self.n


def _activation_values(kvals: np.ndarray, activation: str, threshold: float) -> np.ndarray:
    if activation == "sigmoid":
        return expit(kvals)
    return np.maximum(kvals - threshold, 0.0)


def _gabor_pair_chunks(params: GaborParams, grid: FeatureGrid, radius: float,
                       include_diag: bool, strict: bool):
    """Yield (rows, cols, unit_kernel) per admissible offset, by theta layer.

    Uses the planar translation invariance of the kernel: for a fixed base
    orientation every admissible offset contributes a full rectangle of
    source nodes with one shared kernel value.
    """
    unit = unit_normalized(params)
    mx, my, mt = ball_offset_bounds(unit, grid, radius)
    dxs = np.arange(-mx, mx + 1) * grid.step_x
    dys = np.arange(-my, my + 1) * grid.step_y
    dts = np.arange(-mt, mt + 1)
    oxx, oyy, ott = np.meshgrid(dxs, dys, dts, indexing="ij")
    oxx, oyy, ott = oxx.ravel(), oyy.ravel(), ott.ravel()
    dth = ott * grid.step_theta
    nx, ny, nt = grid.nx, grid.ny, grid.ntheta
    iy_all = np.arange(ny, dtype=np.int32)

    for kt0 in range(nt):
        th0 = grid.thetas[kt0]
        c, s = math.cos(th0), math.sin(th0)
        a = c * oxx + s * oyy
        b = -s * oxx + c * oyy
        kvals = kernel_rel(unit, a, b, dth)
        d = np.sqrt(np.maximum(2.0 - 2.0 * kvals, 0.0))
        keep = (d < radius) if strict else (d <= radius)
        if not include_diag:
            keep &= ~((oxx == 0.0) & (oyy == 0.0) & (ott == 0))
        sel = np.nonzero(keep)[0]
        odx = np.rint(oxx[sel] / grid.step_x).astype(np.int64)
        ody = np.rint(oyy[sel] / grid.step_y).astype(np.int64)
        odt = ott[sel].astype(np.int64)
        kv = kvals[sel]
        for k in range(len(sel)):
            ix_lo = max(0, -odx[k])
            ix_hi = min(nx, nx - odx[k])
            if ix_hi <= ix_lo:
                continue
            iy_ok = iy_all[(iy_all + ody[k] >= 0) & (iy_all + ody[k] < ny)]
            if len(iy_ok) == 0:
                continue
            kt1 = kt0 + odt[k]
            if grid.theta_wraps:
                kt1 = int(kt1 % nt)
            elif not (0 <= kt1 < nt):
                continue
            ixs = np.arange(ix_lo, ix_hi, dtype=np.int32)
            src = (ixs[:, None] * np.int32(ny) + iy_ok[None, :]) * np.int32(nt) + np.int32(kt0)
            dst = ((ixs[:, None] + np.int32(odx[k])) * np.int32(ny)
                   + (iy_ok[None, :] + np.int32(ody[k]))) * np.int32(nt) + np.int32(kt1)
            yield src.ravel(), dst.ravel(), float(kv[k])


def _surface_pair_chunks(params: GaborParams, omap: OrientationMap, radius: float,
                         include_diag: bool, strict: bool):
    """Yield (rows, cols, unit_kernel_values) per planar offset.

    The kernel between surface points compares the filters at the local
    map orientations, so values vary along each offset and are computed
    per source node.
    """
    unit = unit_normalized(params)
    grid = omap.grid
    reach = metric_ball_radius_xy(unit, radius)
    if math.isinf(reach):
        mi, mj = grid.nx - 1, grid.ny - 1
    else:
        mi = min(int(math.floor(reach / grid.step_x)), grid.nx - 1)
        mj = min(int(math.floor(reach / grid.step_y)), grid.ny - 1)
    th = omap.theta_values
    nx, ny = grid.nx, grid.ny
    ix_all = np.arange(nx, dtype=np.int32)
    iy_all = np.arange(ny, dtype=np.int32)
    for di in range(-mi, mi + 1):
        for dj in range(-mj, mj + 1):
            if not include_diag and di == 0 and dj == 0:
                continue
            ix = ix_all[max(0, -di):nx - max(0, di)]
            iy = iy_all[max(0, -dj):ny - max(0, dj)]
            if len(ix) == 0 or len(iy) == 0:
                continue
            th0 = th[np.ix_(ix, iy)]
            th1 = th[np.ix_(ix + di, iy + dj)]
            dx = di * grid.step_x
            dy = dj * grid.step_y
            a = np.cos(th0) * dx + np.sin(th0) * dy
            b = -np.sin(th0) * dx + np.cos(th0) * dy
            kv = kernel_rel(unit, a, b, th1 - th0)
            d = np.sqrt(np.maximum(2.0 - 2.0 * kv, 0.0))
            keep = (d < radius) if strict else (d <= radius)
            if not keep.any():
                continue
            src = (ix[:, None] * np.int32(ny) + iy[None, :])[keep]
            dst = ((ix[:, None] + np.int32(di)) * np.int32(ny)
                   + (iy[None, :] + np.int32(dj)))[keep]
            yield src.ravel(), dst.ravel(), kv[keep].ravel()


def _assemble_csr(chunks, n: int):
    rows, cols, vals = [], [], []
    for src, dst, kv in chunks:
        rows.append(src)
        cols.append(dst)
        if np.isscalar(kv):
            vals.append(np.full(len(src), kv))
        else:
            vals.append(np.asarray(kv, dtype=float))
    if not rows:
        return csr_matrix((n, n))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def default_r_cut(params: GaborParams) -> float:
    """Sparsification radius: three filter scales, in kernel-distance units."""
    return 3.0 * params.sigma


def build_base_kernel(params: GaborParams, domain, r_cut: float | None = None,
                      activation: str = "sigmoid", threshold: float = 0.1) -> SparseKernel:
    """Activated unit-normalized kernel, truncated to pairs with d <= r_cut.

    domain is a FeatureGrid (full position-orientation space) or an
    OrientationMap (surface restriction: each node's filter angle is the
    map value there).  Sigmoid activation stores s(K/t); threshold
    activation stores max(K/t - T, 0), dropping zeros.  Values beyond the
    cutoff are treated as exactly zero.  Raises EmptyRow if a node ends up
    with no neighbor besides itself.
    """
    if r_cut is None:
        r_cut = default_r_cut(params)
    if isinstance(domain, OrientationMap):
        n = domain.grid.nx * domain.grid.ny
        chunks = _surface_pair_chunks(params, domain, r_cut, include_diag=True, strict=False)
    else:
        n = domain.n_nodes
        chunks = _gabor_pair_chunks(params, domain, r_cut, include_diag=True, strict=False)

    def activated():
        for src, dst, kv in chunks:
            av = _activation_values(np.atleast_1d(np.asarray(kv, dtype=float)),
                                    activation, threshold)
            if np.isscalar(kv):
                if av[0] <= 0.0:
                    continue
                yield src, dst, float(av[0])
            else:
                pos = av > 0.0
                if not pos.any():
                    continue
                yield src[pos], dst[pos], av[pos]

    mat = _assemble_csr(activated(), n)
    counts = np.diff(mat.indptr)
    if (counts <= 1).any():
        raise EmptyRow(f"{int((counts <= 1).sum())} nodes have no neighbor within r_cut")
    return SparseKernel(n=n, matrix=mat, cutoff=f"d <= {r_cut:g} ({activation})")


def cl_normalize(kern: SparseKernel, alpha: float = 1.0, Q=None,
                 node_measure=1.0) -> SparseKernel:
    """Two-stage kernel normalization with density exponent alpha.

    First divides by the alpha-th power of the mass profile on both sides
    (removing sampling-density bias at alpha = 1), then row-normalizes so
    every row integrates to one against Q d(mu).
    """
    mat = kern.matrix
    n = kern.n
    mu = np.full(n, node_measure, dtype=float) if np.isscalar(node_measure) \
        else np.asarray(node_measure, dtype=float)
    q = np.ones(n) if Q is None else np.asarray(Q, dtype=float)
    qm = q * mu
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(mat.indptr))
    data = mat.data.copy()

    if alpha != 0.0:
        qt = mat @ qm
        if (qt <= 0.0).any() or not np.isfinite(qt).all():
            raise ZeroRowMass("first-stage mass profile has nonpositive entries")
        qa = qt**alpha
        data /= qa[rows]
        data /= qa[mat.indices]
    interim = csr_matrix((data, mat.indices.copy(), mat.indptr.copy()), shape=mat.shape)
    denom = interim @ qm
    if (denom <= 0.0).any() or not np.isfinite(denom).all():
        raise ZeroRowMass("row normalization hit a nonpositive row mass")
    data /= denom[rows]
    out = csr_matrix((data, interim.indices, interim.indptr), shape=mat.shape)
    return SparseKernel(n=n, matrix=out, cutoff=kern.cutoff + f" | normalized alpha={alpha:g}")


def propagate(kern: SparseKernel, p0: int, params: PropagationParams,
              node_measure=1.0) -> np.ndarray:
    """Iterated kernel propagation seeded at node p0.

    The seed profile is the p0-th row of the normalized kernel, a unit
    mass against the node measure; each further step transports mass
    through the kernel (f'(q) = sum_p S(p, q) f(p) mu(p)), the orientation
    of the operator that conserves the total measure-weighted mass exactly
    for a row-normalized kernel.  Returns the profile after n_steps.
    """
    n = kern.n
    mu = np.full(n, node_measure, dtype=float) if np.isscalar(node_measure) \
        else np.asarray(node_measure, dtype=float)
    f = kern.row_profile(p0)
    transport = kern.matrix.T.tocsr()
    for _ in range(params.n_steps - 1):
        f = transport @ (mu * f)
    return f


def surface_restricted_distance(params: GaborParams, omap: OrientationMap,
                                center_index: int) -> np.ndarray:
    """Unit-normalized kernel distance from one surface node to every node.

    Each node's filter angle is the orientation-map value there, so this
    is the restriction of the feature-space distance to the map's graph.
    """
    unit = unit_normalized(params)
    th = omap.theta_values.ravel()
    pts = omap.grid.points()
    x0, y0 = pts[center_index]
    th0 = th[center_index]
    dx = pts[:, 0] - x0
    dy = pts[:, 1] - y0
    a = math.cos(th0) * dx + math.sin(th0) * dy
    b = -math.sin(th0) * dx + math.cos(th0) * dy
    kv = kernel_rel(unit, a, b, th - th0)
    return np.sqrt(np.maximum(2.0 - 2.0 * kv, 0.0))


@dataclass
class GraphSpec:
    """Neighborhood graph over grid nodes with uniform node weights.

    Vertices are the grid points; nodes i, j are joined exactly when their
    kernel distance is below rho, with edge weight kappa * mu_i * mu_j.
    """

    nodes: np.ndarray
    mu: np.ndarray
    rho: float
    kappa: float
    weights: csr_matrix
    dim: int
    n_components: int = 1

    @property
    def n(self) -> int:
        return len(self.mu)

    @property
    def row_mass(self) -> np.ndarray:
        if not hasattr(self, "_row_mass"):
            self._row_mass = np.asarray(self.weights.sum(axis=1)).ravel()
        return self._row_mass

    def edges(self):
        coo = self.weights.tocoo()
        keep = coo.row < coo.col
        return coo.row[keep], coo.col[keep], coo.data[keep]

    def scaled(self, kappa: float) -> "GraphSpec":
        m = self.weights.copy()
        m.data *= kappa / self.kappa
        return GraphSpec(nodes=self.nodes, mu=self.mu, rho=self.rho,
                         kappa=kappa, weights=m, dim=self.dim,
                         n_components=self.n_components)


def build_graph(params: GaborParams, domain, rho: float, kappa: float = 1.0,
                require_connected: bool = True) -> GraphSpec:
    """Distance graph for the Laplacian: edges below rho, weights kappa*mu_i*mu_j.

    domain is a FeatureGrid or an OrientationMap (surface restriction).
    Node weights are the uniform cell volume of the grid.  Raises
    DisconnectedGraph (with the component count) when rho fails to connect
    the sampling.

    On orientation-map surfaces the graph is genuinely disconnected at any
    rho below the distance saturation level: the map's values live modulo
    pi while the kernel distinguishes the full angle, so cells across a
    0-to-pi seam sit nearly orthogonal.  Pass require_connected=False to
    accept the components (the Laplacian and heat flow act componentwise)
    and read their count off the returned spec.
    """
    if isinstance(domain, OrientationMap):
        n = domain.grid.nx * domain.grid.ny
        cell = domain.grid.cell_area()
        nodes = domain.grid.points()
        chunks = _surface_pair_chunks(params, domain, rho, include_diag=False, strict=True)
        dim = 2
    else:
        n = domain.n_nodes
        cell = domain.cell_volume()
        nodes = domain.points()
        chunks = _gabor_pair_chunks(params, domain, rho, include_diag=False, strict=True)
        dim = 3
    w = kappa * cell * cell

    def weighted():
        for src, dst, _ in chunks:
            yield src, dst, w

    mat = _assemble_csr(weighted(), n)
    ncomp = connected_components(mat, directed=False, return_labels=False)
    if ncomp != 1 and require_connected:
        raise DisconnectedGraph(ncomp)
    mu = np.full(n, cell)
    return GraphSpec(nodes=nodes, mu=mu, rho=rho, kappa=kappa, weights=mat, dim=dim,
                     n_components=int(ncomp))


def build_euclidean_graph(grid2d: Grid2D, rho: float, kappa: float = 1.0) -> GraphSpec:
    """Flat control graph: Euclidean distance on a plane grid, Lebesgue weights.

    This is the reference case that defines the kappa calibration (the
    graph Laplacian of a flat grid must reproduce the plane Laplacian of a
    quadratic).
    """
    pts = grid2d.points()
    nx, ny = grid2d.nx, grid2d.ny
    mi = min(int(math.floor(rho / grid2d.step_x)), nx - 1)
    mj = min(int(math.floor(rho / grid2d.step_y)), ny - 1)
    cell = grid2d.cell_area()
    ix_all = np.arange(nx, dtype=np.int32)
    iy_all = np.arange(ny, dtype=np.int32)

    def chunks():
        for di in range(-mi, mi + 1):
            for dj in range(-mj, mj + 1):
                if di == 0 and dj == 0:
                    continue
                if math.hypot(di * grid2d.step_x, dj * grid2d.step_y) >= rho:
                    continue
                ix = ix_all[max(0, -di):nx - max(0, di)]
                iy = iy_all[max(0, -dj):ny - max(0, dj)]
                if len(ix) == 0 or len(iy) == 0:
                    continue
                src = (ix[:, None] * np.int32(ny) + iy[None, :]).ravel()
                dst = ((ix[:, None] + np.int32(di)) * np.int32(ny)
                       + (iy[None, :] + np.int32(dj))).ravel()
                yield src, dst, kappa * cell * cell

    mat = _assemble_csr(chunks(), nx * ny)
    ncomp = connected_components(mat, directed=False, return_labels=False)
    if ncomp != 1:
        raise DisconnectedGraph(ncomp)
    return GraphSpec(nodes=pts, mu=np.full(nx * ny, cell), rho=rho, kappa=kappa,
                     weights=mat, dim=2)


def laplacian_apply(g: GraphSpec, f) -> np.ndarray:
    """Graph Laplacian L f(i) = (1/mu_i) * sum_j w_ij (f(j) - f(i))."""
    f = np.asarray(f, dtype=float)
    return ((g.weights @ f) - g.row_mass * f) / g.mu


def calibrate_kappa(g: GraphSpec, dist_sq_from_center: np.ndarray, center: int,
                    target: float | None = None) -> float:
    """Weight constant making L match the Laplacian of the squared distance.

    The squared distance from an interior node has Laplacian 2 * dim at
    its center (exactly, for the flat control back-to-back with the
    Euclidean distance), so the ratio of that target to the raw graph
    value at the center calibrates kappa.
    """
    if target is None:
        target = 2.0 * g.dim
    raw = laplacian_apply(g, dist_sq_from_center)[center]
    if raw <= 0:
        raise ValueError("degenerate calibration stencil")
    return float(g.kappa * target / raw)


@dataclass
class HeatState:
    """Heat profile after explicit-Euler stepping."""

    f: np.ndarray
    time: float
    steps: int


def dirac_profile(g: GraphSpec, node: int) -> np.ndarray:
    """Initial datum: indicator of the start node divided by its weight (unit mass)."""
    f0 = np.zeros(g.n)
    f0[node] = 1.0 / g.mu[node]
    return f0


def heat_run(g: GraphSpec, f0: np.ndarray, dt: float, n_iter: int) -> HeatState:
    """Explicit Euler heat flow f <- f + dt * L f for n_iter steps.

    Refuses to run when dt times the largest weighted degree reaches one
    (the row-sum stability bound); under that guard the scheme conserves
    the measure-weighted mass and preserves nonnegativity.
    """
    stab = dt * float((g.row_mass / g.mu).max())
    if stab >= 1.0:
        raise UnstableStep(f"dt * max row sum = {stab:.3f} >= 1")
    f = np.asarray(f0, dtype=float).copy()
    for _ in range(n_iter):
        f += dt * laplacian_apply(g, f)
    return HeatState(f=f, time=dt * n_iter, steps=n_iter)


# ---------------------------------------------------------------------------
# field summaries


def argmax_orientation(field3d: np.ndarray, thetas: np.ndarray, theta0: float,
                       wraps: bool = False):
    """Per-location maximum over orientation and its maximizing angle.

    Ties go to the sample closest in angle to theta0 (wrap-aware when the
    orientation axis covers the full circle).
    """
    field3d = np.asarray(field3d, dtype=float)
    max_val = field3d.max(axis=2)
    if wraps:
        ang = np.abs((thetas - theta0 + math.pi) % (2.0 * math.pi) - math.pi)
    else:
        ang = np.abs(thetas - theta0)
    cost = np.where(field3d == max_val[..., None], ang[None, None, :], np.inf)
    idx = cost.argmin(axis=2)
    return thetas[idx], max_val


def second_moments(field2d: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                   center, direction):
    """Second moments of a nonnegative field along and across a direction."""
    f = np.asarray(field2d, dtype=float)
    cx, cy = center
    ux, uy = direction
    norm = math.hypot(ux, uy)
    ux, uy = ux / norm, uy / norm
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    along = (xx - cx) * ux + (yy - cy) * uy
    trans = -(xx - cx) * uy + (yy - cy) * ux
    total = f.sum()
    if total <= 0:
        raise ValueError("field has no mass")
    return float((f * along**2).sum() / total), float((f * trans**2).sum() / total)


def top_decile_mask(field: np.ndarray) -> np.ndarray:
    """Cells at or above the 90th percentile of the field values."""
    f = np.asarray(field, dtype=float)
    return f >= np.quantile(f, 0.9)


def jaccard_index(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    union = np.logical_or(mask_a, mask_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask_a, mask_b).sum() / union)


def patchiness_stats(omap: OrientationMap, field2d: np.ndarray, theta0: float) -> dict:
    """Concentration of a propagated field on map regions of matching orientation.

    Compares the median angular difference (mod pi) between the map and
    theta0 over the top-decile region of the field against the same median
    over the whole map; a ratio well below one means the activity peaks
    where the map orientation resembles the seed's.
    """
    diff = np.abs(omap.theta_values - theta0) % math.pi
    diff = np.minimum(diff, math.pi - diff)
    top = top_decile_mask(field2d)
    med_top = float(np.median(diff[top]))
    med_all = float(np.median(diff))
    ratio = med_top / med_all if med_all > 0 else math.inf
    return {
        "median_angle_diff_top_decile": med_top,
        "median_angle_diff_overall": med_all,
        "ratio": ratio,
        "top_decile_cells": int(top.sum()),
    }
