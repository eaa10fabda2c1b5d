"""Measures compatible with the kernel distances, and their diagnostics.

The filter space carries a constant-density Riemannian volume (sqrt of the
metric determinant); an orientation-map surface carries the area density
|N_h| from surface.py.  On top of these the module provides discrete ball
volumes, the r-approximating Dirichlet form with its flat-grid calibration,
and a numeric check of the measure contraction inequality under the
anisotropic dilations of the exponential chart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import RadiusUnresolved
from .metric import MetricConfig, metric_determinant
from .surface import OrientationMap, area_density, exp_map

# ---------------------------------------------------------------------------
# measure specifications


@dataclass
class MeasureSpec:
    """A measure given by a pointwise density over a coordinate grid."""

    kind: str
    density: object  # callable: (N, k) points -> (N,) densities

    def density_at(self, pts) -> np.ndarray:
        return np.asarray(self.density(pts), dtype=float)


def gabor_measure(cfg: MetricConfig) -> MeasureSpec:
    """Riemannian volume of the filter space: constant density sqrt(det g)."""
    dens = math.sqrt(metric_determinant(cfg))
    return MeasureSpec(kind="gabor_volume",
                       density=lambda pts: np.full(len(np.atleast_2d(pts)), dens))


def surface_measure(omap: OrientationMap) -> MeasureSpec:
    """Surface area measure |N_h| dA; NaN on pinwheel cells (excluded from sums)."""
    return MeasureSpec(
        kind="surface_area",
        density=lambda pts: np.atleast_1d(area_density(omap, pts, on_exceptional="nan")),
    )


# ---------------------------------------------------------------------------
# ball volumes on coordinate grids


def _grid_info(grid):
    pts = grid.points()
    if hasattr(grid, "cell_volume"):
        cv = grid.cell_volume()
        steps = (grid.step_x, grid.step_y, grid.step_theta)
    else:
        cv = grid.cell_area()
        steps = (grid.step_x, grid.step_y)
    return pts, cv, steps


def ball_volume(spec: MeasureSpec, dist, grid, x, r: float) -> float:
    """Measure of the ball B_r(x): density-weighted count of grid nodes.

    dist is a batched callable (points, center) -> distances; NaN
    distances or densities mark excluded nodes.  Raises RadiusUnresolved
    when the included nodes span fewer than 4 cells across the ball's
    narrowest axis.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    pts, cv, steps = _grid_info(grid)
    d = np.asarray(dist(pts, x), dtype=float)
    inside = np.isfinite(d) & (d < r)
    if not inside.any():
        raise RadiusUnresolved("ball contains no grid node")
    sel = pts[inside]
    for ax, step in enumerate(steps):
        span = (sel[:, ax].max() - sel[:, ax].min()) / step + 1.0
        if span < 4.0 - 1e-9:
            raise RadiusUnresolved(
                f"ball spans only {span:.1f} cells along axis {ax} (need >= 4)")
    dens = spec.density_at(sel)
    return float(np.nansum(dens) * cv)


@dataclass
class BallVolumeTable:
    """Volumes of concentric balls; volumes are nondecreasing in the radius."""

    center: np.ndarray
    radii: list
    volumes: list

    def is_monotone(self) -> bool:
        return all(b >= a - 1e-12 for a, b in zip(self.volumes, self.volumes[1:]))


def ball_volume_table(spec: MeasureSpec, dist, grid, x, radii) -> BallVolumeTable:
    vols = [ball_volume(spec, dist, grid, x, r) for r in radii]
    return BallVolumeTable(center=np.asarray(x, dtype=float),
                           radii=list(radii), volumes=vols)


def mu_r_mass(spec: MeasureSpec, dist, grid, nodes, r: float) -> float:
    """Mass of a node set under the ball-normalized measure d mu / sqrt(mu(B_r)).

    nodes is an iterable of points (rows).  Each term divides the node's
    density-weighted cell volume by the square root of its own ball volume.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    if len(nodes) == 0:
        return 0.0
    _, cv, _ = _grid_info(grid)
    dens = spec.density_at(nodes)
    total = 0.0
    for q, rho in zip(nodes, dens):
        total += rho * cv / math.sqrt(ball_volume(spec, dist, grid, q, r))
    return float(total)


# ---------------------------------------------------------------------------
# approximating Dirichlet form


def dirichlet_form_Er(spec: MeasureSpec, dist, grid, u, r: float,
                      normalization: float = 1.0, interior_margin: float = 2.0) -> float:
    """Discrete double integral of the difference-quotient energy at scale r.

    E^r(u) = (N/2) sum_x sum_{z in B_r(x), z != x}
             ((u(z)-u(x))/d(z,x))^2 * m_r(z) * m_r(x)

    with m_r(q) = density(q) * cell / sqrt(mu(B_r(q))).  The outer sum runs
    over nodes at coordinate distance >= interior_margin * r from the grid
    boundary so every ball involved is untruncated; pass 0 to sum over the
    whole grid.  u is an array of node values or a callable on points.
    The normalization constant is calibrated once on the flat plane (see
    calibrate_er_normalization).
    """
    pts, cv, steps = _grid_info(grid)
    n = len(pts)
    uvals = np.asarray(u(pts) if callable(u) else u, dtype=float).reshape(n)
    dens = spec.density_at(pts)

    margin = interior_margin * r
    interior = np.ones(n, dtype=bool)
    for ax in range(pts.shape[1]):
        lo, hi = pts[:, ax].min(), pts[:, ax].max()
        interior &= (pts[:, ax] >= lo + margin - 1e-12) & (pts[:, ax] <= hi - margin + 1e-12)
    if not interior.any():
        raise ValueError("no interior nodes at this margin; shrink r or the margin")

    # ball volumes at every node that can appear in a pair
    ballv = np.empty(n)
    ballv.fill(np.nan)
    need = np.zeros(n, dtype=bool)
    dist_rows = {}
    for i in np.nonzero(interior)[0]:
        d = np.asarray(dist(pts, pts[i]), dtype=float)
        dist_rows[i] = d
        need |= np.isfinite(d) & (d < r)
    need |= interior
    for j in np.nonzero(need)[0]:
        dj = dist_rows.get(j)
        if dj is None:
            dj = np.asarray(dist(pts, pts[j]), dtype=float)
        inside = np.isfinite(dj) & (dj < r)
        ballv[j] = np.nansum(dens[inside]) * cv

    mass = dens * cv / np.sqrt(ballv)
    total = 0.0
    for i in np.nonzero(interior)[0]:
        d = dist_rows[i]
        inside = np.isfinite(d) & (d < r)
        inside[i] = False
        if not inside.any():
            continue
        quot = (uvals[inside] - uvals[i]) / d[inside]
        total += float(np.sum(quot**2 * mass[inside]) * mass[i])
    return 0.5 * normalization * total


def calibrate_er_normalization(r: float = 0.35, step: float = 0.05,
                               extent: float = 1.2) -> float:
    """Fix the E^r normalization on the flat plane.

    On a flat 2D grid with Lebesgue density and Euclidean distance, the
    energy of u(x, y) = x must equal half the interior area (the Dirichlet
    integral of a unit-gradient function); the returned constant rescales
    the raw discrete double sum to match.
    """
    from .surface import Grid2D  # local import to avoid a cycle at module load

    grid = Grid2D(-extent, extent, step, -extent, extent, step)
    spec = MeasureSpec(kind="flat", density=lambda pts: np.ones(len(np.atleast_2d(pts))))
    dist = lambda pts, x: np.linalg.norm(np.atleast_2d(pts) - np.asarray(x), axis=1)
    u = lambda pts: np.atleast_2d(pts)[:, 0]
    raw = dirichlet_form_Er(spec, dist, grid, u, r, normalization=1.0)
    pts, cv, _ = _grid_info(grid)
    margin = 2.0 * r
    interior = np.ones(len(pts), dtype=bool)
    for ax in range(2):
        lo, hi = pts[:, ax].min(), pts[:, ax].max()
        interior &= (pts[:, ax] >= lo + margin - 1e-12) & (pts[:, ax] <= hi - margin + 1e-12)
    target = 0.5 * interior.sum() * cv
    return float(target / raw)


# ---------------------------------------------------------------------------
# exponential-chart quadrature for surface balls


def _chart_cells(r: float, n1: int, n2: int):
    """Midpoints and cell area of a chart grid covering {e1^2 + |e2| < r^2}."""
    e1 = (np.arange(n1) + 0.5) / n1 * 2.0 * r - r
    e2 = (np.arange(n2) + 0.5) / n2 * 2.0 * r * r - r * r
    g1, g2 = np.meshgrid(e1, e2, indexing="ij")
    cells = np.column_stack([g1.ravel(), g2.ravel()])
    area = (2.0 * r / n1) * (2.0 * r * r / n2)
    inside = cells[:, 0] ** 2 + np.abs(cells[:, 1]) < r * r
    return cells[inside], area


def _exp_with_jacobian(omap: OrientationMap, xi, coords, delta: float):
    """Batched exp images and absolute Jacobian determinants via differences."""
    n = len(coords)
    probe = np.concatenate([
        coords,
        coords + [[delta, 0.0]],
        coords + [[0.0, delta]],
    ])
    out = exp_map(omap, xi, probe, on_exit="nan") if np.asarray(xi).ndim == 1 else \
        exp_map(omap, np.tile(xi, (3, 1)), probe, on_exit="nan")
    f0, f1, f2 = out[:n], out[n:2 * n], out[2 * n:]
    c1 = (f1 - f0) / delta
    c2 = (f2 - f0) / delta
    jac = np.abs(c1[:, 0] * c2[:, 1] - c1[:, 1] * c2[:, 0])
    return f0, jac


def surface_ball_volume_chart(omap: OrientationMap, spec: MeasureSpec, xi, r: float,
                              n1: int = 30, n2: int = 10):
    """Ball measure via the exponential chart: integral of f * |J| over the chart ball.

    The chart ball is exactly {e1^2 + |e2| < r^2}, so no distance
    inversion is needed; returns (volume, excluded_fraction).
    """
    cells, area = _chart_cells(r, n1, n2)
    pos, jac = _exp_with_jacobian(omap, np.asarray(xi, dtype=float), cells,
                                  delta=1e-5 * max(r, 1e-3))
    f = spec.density_at(pos)
    good = np.isfinite(f) & np.isfinite(jac) & np.isfinite(pos).all(axis=1)
    vol = float(np.sum(f[good] * jac[good]) * area)
    return vol, 1.0 - good.mean()


# ---------------------------------------------------------------------------
# measure contraction check


@dataclass
class McpReport:
    """Worst contraction constants observed over a sweep of sampled sub-cells."""

    centers: list
    radii: list
    t_values: list
    theta_worst: float
    theta_by_radius: dict
    samples: list = field(default_factory=list)
    excluded: int = 0
    theta_max: float = 4.0

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.theta_worst):
            return False
        worst = [self.theta_by_radius[r] for r in sorted(self.theta_by_radius)]
        decreasing = all(a <= b + 1e-9 for a, b in zip(worst, worst[1:]))
        smallest = worst[0] if worst else math.inf
        return decreasing and smallest <= self.theta_max

    def to_dict(self) -> dict:
        return {
            "centers": [list(map(float, c)) for c in self.centers],
            "radii": list(map(float, self.radii)),
            "t_values": list(map(float, self.t_values)),
            "theta_worst": float(self.theta_worst),
            "theta_by_radius": {f"{k:g}": float(v) for k, v in self.theta_by_radius.items()},
            "excluded": int(self.excluded),
            "theta_max": float(self.theta_max),
            "passed": bool(self.passed),
            "n_samples": len(self.samples),
        }


def mcp_check(spec: MeasureSpec, omap: OrientationMap, centers, radii, t_values,
              theta_max: float = 4.0, n_subcells: int = 12,
              chart_cells=(30, 10)) -> McpReport:
    """Numeric contraction inequality on an orientation-map surface.

    For sampled sub-cells A of each ball B_r(x), compares the
    ball-normalized mass of A with that of its image under the chart
    dilation (e1, e2) -> (t e1, t^2 e2), and records the constant each
    sample would require.  Samples whose chart quadrature touches the
    exceptional set or leaves the domain are excluded and counted, not
    fatal.
    """
    n1, n2 = chart_cells
    samples = []
    excluded = 0
    theta_by_radius: dict = {}
    for xi in centers:
        xi = np.asarray(xi, dtype=float)
        for r in radii:
            try:
                ball_x_r, bad_frac = surface_ball_volume_chart(omap, spec, xi, r, n1, n2)
            except Exception:
                excluded += 1
                continue
            if bad_frac > 0.2 or ball_x_r <= 0:
                excluded += 1
                continue
            cells, area = _chart_cells(r, n1, n2)
            pos, jac = _exp_with_jacobian(omap, xi, cells, delta=1e-5 * r)
            f_here = spec.density_at(pos)
            good = np.isfinite(f_here) & np.isfinite(jac) & np.isfinite(pos).all(axis=1)
            good_idx = np.nonzero(good)[0]
            if len(good_idx) == 0:
                excluded += 1
                continue
            stride = max(1, len(good_idx) // n_subcells)
            chosen = good_idx[::stride][:n_subcells]

            # per-subcell ball volumes at radius r (shared across t)
            sub_ball = {}
            for c in chosen:
                try:
                    bv, bf = surface_ball_volume_chart(omap, spec, pos[c], r, n1, n2)
                except Exception:
                    bv, bf = np.nan, 1.0
                sub_ball[c] = bv if bf <= 0.2 and bv > 0 else np.nan

            for t in t_values:
                try:
                    ball_x_rt, bf = surface_ball_volume_chart(omap, spec, xi, r * t, n1, n2)
                except Exception:
                    excluded += 1
                    continue
                if bf > 0.2 or ball_x_rt <= 0:
                    excluded += 1
                    continue
                dil = np.column_stack([t * cells[chosen, 0], t * t * cells[chosen, 1]])
                img, jac_img = _exp_with_jacobian(omap, xi, dil, delta=1e-5 * r * t)
                f_img = spec.density_at(img)
                for k, c in enumerate(chosen):
                    if not (np.isfinite(sub_ball[c]) and np.isfinite(f_img[k])
                            and np.isfinite(jac_img[k]) and np.isfinite(img[k]).all()):
                        excluded += 1
                        continue
                    try:
                        img_ball, bf2 = surface_ball_volume_chart(
                            omap, spec, img[k], r * t, n1, n2)
                    except Exception:
                        excluded += 1
                        continue
                    if bf2 > 0.2 or img_ball <= 0:
                        excluded += 1
                        continue
                    lhs = f_here[c] * jac[c] * area / math.sqrt(sub_ball[c]) / math.sqrt(ball_x_r)
                    rhs = (f_img[k] * jac_img[k] * t**3 * area
                           / math.sqrt(img_ball) / math.sqrt(ball_x_rt))
                    if rhs <= 0:
                        excluded += 1
                        continue
                    theta_req = lhs / rhs
                    samples.append({
                        "center": [float(xi[0]), float(xi[1])],
                        "r": float(r), "t": float(t), "cell": int(c),
                        "theta_required": float(theta_req),
                    })
                    theta_by_radius[r] = max(theta_by_radius.get(r, 0.0), theta_req)
    theta_worst = max((s["theta_required"] for s in samples), default=math.inf)
    return McpReport(centers=[list(map(float, np.asarray(c))) for c in centers],
                     radii=list(radii), t_values=list(t_values),
                     theta_worst=theta_worst, theta_by_radius=theta_by_radius,
                     samples=samples, excluded=excluded, theta_max=theta_max)


def mcp_euclidean_control(r=Fraction(1, 2), t=Fraction(3, 4), n_cells: int = 20):
    """Contraction constant for the plane with straight-line scaling, exactly.

    Works in rational arithmetic: A is a discrete disc of counted cells,
    the linear dilation scales every area by t^2 and balls by the same
    factor, and the square-root ball factors always enter in pairs, so the
    required constant is an exact Fraction (equal to one).
    """
    r = Fraction(r)
    t = Fraction(t)
    h = Fraction(2) * r / n_cells
    count = 0
    for i in range(n_cells):
        for j in range(n_cells):
            cx = -r + h * (2 * i + 1) / 2
            cy = -r + h * (2 * j + 1) / 2
            if cx * cx + cy * cy < r * r:
                count += 1
    mu_a = count * h * h
    ball_r = mu_a  # A is the discretized ball itself
    mu_image = t * t * mu_a          # exact linear-scaling Jacobian
    ball_rt = t * t * ball_r         # B_{rt} is the scaled ball
    # mu_r(A)/sqrt(mu(B_r)) over mu_rt(Phi_t A)/sqrt(mu(B_rt)); the square
    # roots pair up into plain ball measures, keeping everything rational
    lhs_sq = (mu_a * mu_a) / (ball_r * ball_r)
    rhs_sq = (mu_image * mu_image) / (ball_rt * ball_rt)
    theta_sq = lhs_sq / rhs_sq
    return theta_sq  # == Fraction(1, 1) iff the scaling argument is exact
