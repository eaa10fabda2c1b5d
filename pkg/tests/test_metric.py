import math

import numpy as np
import pytest

from v1geom import (
    FeatureGrid,
    FeaturePoint,
    GaborParams,
    GluedDistance,
    MetricConfig,
    NodeNotOnGrid,
    PatchSpec,
    distance,
    glued_distance,
    kernel_closed,
    kernel_numeric,
    limit_cometric,
    local_metric_tensor,
    patch_contains,
)
from v1geom.metric import (
    distance_many,
    kernel_many,
    metric_determinant,
    relative_coords,
)

RAW = GaborParams(1.0, 1.0, normalize_unit=False)
UNIT = GaborParams(1.0, 1.0, normalize_unit=True)


def test_kernel_at_coincidence():
    cfg = MetricConfig(RAW)
    p = FeaturePoint(0.3, -0.2, 1.1)
    assert kernel_closed(cfg, p, p) == pytest.approx(math.pi, rel=1e-14)
    cfg_u = MetricConfig(UNIT)
    assert kernel_closed(cfg_u, p, p) == pytest.approx(1.0, rel=1e-14)


def test_kernel_spec_value():
    cfg = MetricConfig(RAW)
    val = kernel_closed(cfg, FeaturePoint(1, 0, 0), FeaturePoint(0, 0, 0))
    assert val == pytest.approx(math.pi * math.exp(-0.25), rel=1e-12)
    assert val == pytest.approx(2.4464, abs=3e-4)


def test_kernel_invariance_identity():
    cfg = MetricConfig(RAW)
    rng = np.random.default_rng(5)
    for _ in range(30):
        p = FeaturePoint(*rng.uniform(-1, 1, 2), rng.uniform(0, 2 * math.pi))
        p0 = FeaturePoint(*rng.uniform(-1, 1, 2), rng.uniform(0, 2 * math.pi))
        a, b, dth = relative_coords(p, p0)
        lhs = kernel_closed(cfg, p, p0)
        rhs = kernel_closed(cfg, FeaturePoint(a, b, dth), FeaturePoint(0, 0, 0))
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_kernel_closed_vs_quadrature():
    rng = np.random.default_rng(17)
    for _ in range(5):
        sig = rng.uniform(0.6, 1.4)
        lam = rng.uniform(0.6, 1.4)
        cfg = MetricConfig(GaborParams(lam, sig, normalize_unit=False))
        p0 = FeaturePoint(*rng.uniform(-0.5, 0.5, 2), rng.uniform(0, 2 * math.pi))
        p = FeaturePoint(p0.x + rng.uniform(-1, 1) * sig, p0.y + rng.uniform(-1, 1) * sig,
                         p0.theta + rng.uniform(-0.8, 0.8))
        closed = kernel_closed(cfg, p, p0)
        quad = kernel_numeric(cfg, p, p0)
        assert abs(closed - quad) <= 1e-6 * sig**2 * math.pi


def test_numeric_mode_dispatch():
    cfg = MetricConfig(UNIT, mode="numeric")
    p = FeaturePoint(0.4, 0.1, 0.2)
    p0 = FeaturePoint(0, 0, 0)
    from v1geom.metric import kernel

    assert kernel(cfg, p, p0) == pytest.approx(
        kernel_closed(MetricConfig(UNIT), p, p0), abs=1e-8)


def test_distance_identity_and_symmetry():
    cfg = MetricConfig(UNIT)
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = FeaturePoint(*rng.uniform(-1, 1, 2), rng.uniform(0, 2 * math.pi))
        q = FeaturePoint(*rng.uniform(-1, 1, 2), rng.uniform(0, 2 * math.pi))
        assert distance(cfg, p, p) == 0.0
        assert distance(cfg, p, q) == pytest.approx(distance(cfg, q, p), abs=1e-14)


def test_distance_antipodal_orientation():
    cfg = MetricConfig(UNIT)
    d2 = distance(cfg, FeaturePoint(0, 0, math.pi), FeaturePoint(0, 0, 0)) ** 2
    assert d2 == pytest.approx(2.0 * (1.0 - math.exp(-4 * math.pi**2)), abs=1e-9)


def test_patch_trivial_cases():
    spec = PatchSpec(1.0)
    p0 = FeaturePoint(0, 0, 0)
    assert patch_contains(spec, p0, p0)
    assert patch_contains(spec, FeaturePoint(0, 5.0, 0), p0)
    assert not patch_contains(spec, FeaturePoint(1.0, 0, 0), p0)


def test_patch_symmetry():
    spec = PatchSpec(1.0)
    rng = np.random.default_rng(9)
    for _ in range(200):
        p = FeaturePoint(*rng.uniform(-2, 2, 2), rng.uniform(0, 2 * math.pi))
        q = FeaturePoint(*rng.uniform(-2, 2, 2), rng.uniform(0, 2 * math.pi))
        assert patch_contains(spec, p, q) == patch_contains(spec, q, p)


def test_patch_contains_a_ball():
    # some metric ball around any point fits inside its patch
    spec = PatchSpec(1.0)
    rng = np.random.default_rng(21)
    for _ in range(5):
        p0 = FeaturePoint(*rng.uniform(-1, 1, 2), rng.uniform(0, 2 * math.pi))
        # sample points outside the patch; their distance to p0 is bounded away from 0
        pts = np.column_stack([
            p0.x + rng.uniform(-3, 3, 4000),
            p0.y + rng.uniform(-3, 3, 4000),
            p0.theta + rng.uniform(-math.pi, math.pi, 4000),
        ])
        outside = [FeaturePoint(*q) for q in pts
                   if not patch_contains(spec, FeaturePoint(*q), p0)]
        assert outside, "sampling failed to hit the patch complement"
        eps = min(distance(MetricConfig(UNIT), q, p0) for q in outside)
        assert eps > 1e-3


SMALL_GRID = FeatureGrid(-0.6, 0.61, 0.2, -0.6, 0.61, 0.2, 0.0, 2 * math.pi, math.pi / 4)


@pytest.fixture(scope="module")
def glued():
    return GluedDistance(MetricConfig(UNIT), PatchSpec(1.0), SMALL_GRID)


def test_glued_identity(glued):
    p = FeaturePoint(0.2, -0.4, math.pi / 2)
    assert glued.between(p, p) == 0.0


def test_glued_single_hop_equality(glued):
    # within a patch the L2 triangle inequality makes the direct edge optimal
    cfg = MetricConfig(UNIT)
    p0 = FeaturePoint(0.0, 0.0, 0.0)
    p = FeaturePoint(0.0, 0.2, 0.0)
    assert patch_contains(PatchSpec(1.0), p, p0)
    d = distance(cfg, p, p0)
    assert glued.between(p, p0) == pytest.approx(d, abs=1e-12)


def test_glued_symmetry_and_axioms(glued):
    rng = np.random.default_rng(33)
    n = SMALL_GRID.n_nodes
    for _ in range(60):
        i, j, k = rng.integers(0, n, size=3)
        p, s, q = (SMALL_GRID.node_point(int(t)) for t in (i, j, k))
        dpq = glued.between(p, q)
        dqp = glued.between(q, p)
        assert dpq == dqp  # canonical source: exact symmetry
        assert dpq >= 0.0
        if i != k:
            assert dpq > 0.0
        assert glued.between(p, s) + glued.between(s, q) >= dpq - 1e-9


def test_glued_explicit_sequence_admissible(glued):
    spec = PatchSpec(1.0)
    rng = np.random.default_rng(44)
    quarter = math.pi / 2
    for _ in range(20):
        x = float(rng.choice(SMALL_GRID.xs))
        y = float(rng.choice(SMALL_GRID.ys))
        th = float(rng.choice(SMALL_GRID.thetas))
        seq = [
            FeaturePoint(0, 0, 0),
            FeaturePoint(0, y, 0),
            FeaturePoint(0, y, quarter),
            FeaturePoint(x, y, quarter),
            FeaturePoint(x, y, th),
        ]
        for a, b in zip(seq, seq[1:]):
            assert patch_contains(spec, b, a)
        assert glued.between(seq[0], seq[-1]) < math.inf


def test_glued_unreachable_is_infinite():
    gd = GluedDistance(MetricConfig(UNIT), PatchSpec(1.0), SMALL_GRID, r_hop=1e-9)
    assert gd.between(FeaturePoint(0, 0, 0), FeaturePoint(0.2, 0, 0)) == math.inf


def test_glued_requires_grid_nodes(glued):
    with pytest.raises(NodeNotOnGrid):
        glued.between(FeaturePoint(0.123, 0, 0), FeaturePoint(0, 0, 0))


def test_glued_convenience_matches_class(glued):
    p = FeaturePoint(0.2, 0.2, 0.0)
    q = FeaturePoint(-0.4, 0.0, math.pi)
    val = glued_distance(MetricConfig(UNIT), PatchSpec(1.0), SMALL_GRID, p, q)
    assert val == glued.between(p, q)


def test_local_tensor_spec_values():
    cfg = MetricConfig(RAW)
    mt = local_metric_tensor(cfg, FeaturePoint(0, 0, 0))
    expect = 2 * math.pi * np.diag([0.25 + 2 * math.pi**2, 0.25, math.pi**2])
    assert np.allclose(mt.g, expect, rtol=1e-12)
    assert np.allclose(np.diag(mt.g), [125.60, 1.5708, 62.012], atol=5e-3)
    assert np.abs(mt.g @ mt.g_inv - np.eye(3)).max() < 1e-10


def test_determinant_is_base_point_free():
    cfg = MetricConfig(RAW)
    det0 = np.linalg.det(local_metric_tensor(cfg, FeaturePoint(0, 0, 0)).g)
    det1 = np.linalg.det(local_metric_tensor(cfg, FeaturePoint(3, -1, 2.2)).g)
    printed = metric_determinant(cfg)
    assert det0 == pytest.approx(printed, rel=1e-10)
    assert det1 == pytest.approx(printed, rel=1e-10)
    sig, lam = 1.0, 1.0
    explicit = (8 * sig**6 * math.pi**3
                * (1 / (4 * sig**2) + 2 * math.pi**2 / lam**2)
                * (1 / (4 * sig**2)) * (sig**2 * math.pi**2 / lam**2))
    assert printed == pytest.approx(explicit, rel=1e-12)


def test_tensor_quarter_turn_swaps_planar_block():
    cfg = MetricConfig(RAW)
    g0 = local_metric_tensor(cfg, FeaturePoint(0, 0, 0)).g
    g90 = local_metric_tensor(cfg, FeaturePoint(0, 0, math.pi / 2)).g
    assert g90[0, 0] == pytest.approx(g0[1, 1], abs=1e-9)
    assert g90[1, 1] == pytest.approx(g0[0, 0], abs=1e-9)
    assert g90[2, 2] == pytest.approx(g0[2, 2], abs=1e-12)


def _fd_hessian(cfg, p0, h=1e-3):
    base = np.array([p0.x, p0.y, p0.theta])

    def d2(v):
        return distance(cfg, FeaturePoint(*v), p0) ** 2

    H = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            ei = np.zeros(3)
            ei[i] = h
            ej = np.zeros(3)
            ej[j] = h
            if i == j:
                H[i, i] = (d2(base + ei) - 2 * d2(base) + d2(base - ei)) / h**2
            else:
                H[i, j] = (d2(base + ei + ej) - d2(base + ei - ej)
                           - d2(base - ei + ej) + d2(base - ei - ej)) / (4 * h**2)
    return H


def test_hessian_matches_tensor():
    rng = np.random.default_rng(55)
    for _ in range(10):
        sig = rng.uniform(0.6, 1.5)
        lam = rng.uniform(0.6, 1.5)
        cfg = MetricConfig(GaborParams(lam, sig, normalize_unit=False))
        p0 = FeaturePoint(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 2 * math.pi))
        g = local_metric_tensor(cfg, p0).g
        H = _fd_hessian(cfg, p0)
        scale = np.abs(g).max()
        assert np.abs(H / 2.0 - g).max() <= 0.01 * scale


def test_cometric_value_and_rank():
    lim = limit_cometric(1.0, math.pi / 2)
    expect = (2.0 / math.pi) * np.diag([1.0, 0.0, 1.0 / (4 * math.pi**2)])
    assert np.allclose(lim, expect, atol=1e-14)
    rng = np.random.default_rng(1)
    for th in rng.uniform(0, 2 * math.pi, 10):
        block = limit_cometric(2.0, th)[:2, :2]
        assert np.linalg.matrix_rank(block, tol=1e-12) == 1


def test_cometric_limit_convergence():
    A = 1.0
    errs = []
    for lam in (1e-1, 1e-2, 1e-3):
        par = GaborParams(lam=lam, sigma=math.sqrt(A * lam), normalize_unit=False)
        g_inv = local_metric_tensor(MetricConfig(par), FeaturePoint(0, 0, 0.8)).g_inv
        errs.append(np.abs(g_inv - limit_cometric(A, 0.8)).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[-1] <= 5e-3


def test_vectorized_kernel_and_distance_match_scalar():
    par = GaborParams(0.8, 0.4)
    cfg = MetricConfig(par)
    rng = np.random.default_rng(8)
    pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50),
                           rng.uniform(0, 2 * math.pi, 50)])
    p0 = FeaturePoint(0.1, -0.2, 0.5)
    kv = kernel_many(par, pts, p0)
    dv = distance_many(par, pts, p0)
    for k in range(0, 50, 7):
        p = FeaturePoint(*pts[k])
        assert kv[k] == pytest.approx(kernel_closed(cfg, p, p0), abs=1e-14)
        assert dv[k] == pytest.approx(distance(cfg, p, p0), abs=1e-14)
