import cmath
import math

import numpy as np
import pytest

from v1geom import (
    FeaturePoint,
    GaborParams,
    GridMismatch,
    GridTooCoarse,
    GridTooSmall,
    RetinalGrid,
    gabor_eval,
    l2_inner,
    sample_filter,
)
from v1geom.filters import default_grid, filter_to_csv_rows, read_filter_csv


def grid_for(p, sigma, lam, pad=5.0, spw=16):
    return default_grid(GaborParams(lam, sigma), [p], samples_per_wavelength=spw,
                        support_sigmas=pad)


def test_mother_filter_at_origin():
    par = GaborParams(1.0, 1.0)
    assert gabor_eval(par, FeaturePoint(0, 0, 0), 0.0, 0.0) == pytest.approx(1.0 + 0.0j)


def test_mother_filter_half_wavelength():
    par = GaborParams(1.0, 1.0)
    val = gabor_eval(par, FeaturePoint(0, 0, 0), 0.5, 0.0)
    expect = cmath.exp(1j * math.pi) * math.exp(-1.0 / 8.0)
    assert val == pytest.approx(expect, abs=1e-15)
    assert val.real == pytest.approx(-0.8825, abs=1e-4)


def test_rotational_covariance_pointwise():
    # the filter at angle theta, probed at the rotated location, matches the mother
    par = GaborParams(1.0, 1.0)
    rng = np.random.default_rng(42)
    for _ in range(20):
        th = rng.uniform(0, 2 * math.pi)
        w = rng.uniform(-2, 2, size=2)
        rw = (math.cos(th) * w[0] - math.sin(th) * w[1],
              math.sin(th) * w[0] + math.cos(th) * w[1])
        lhs = gabor_eval(par, FeaturePoint(0, 0, th), *rw)
        rhs = gabor_eval(par, FeaturePoint(0, 0, 0), *w)
        assert abs(lhs - rhs) < 1e-12


def test_quarter_turn_matches_spec_example():
    par = GaborParams(1.0, 1.0)
    lhs = gabor_eval(par, FeaturePoint(0, 0, math.pi / 2), 0.0, 0.5)
    rhs = gabor_eval(par, FeaturePoint(0, 0, 0), 0.5, 0.0)
    assert abs(lhs - rhs) < 1e-15


def test_sampled_norm_is_sigma_sq_pi():
    par = GaborParams(1.0, 1.0, normalize_unit=False)
    f = sample_filter(par, FeaturePoint(0, 0, 0), RetinalGrid(-4, 4, -4, 4, 256, 256))
    assert abs(f.sq_norm - math.pi) / math.pi < 1e-6


def test_sampled_norm_random_params():
    rng = np.random.default_rng(7)
    for _ in range(5):
        sig = rng.uniform(0.5, 2.0)
        lam = rng.uniform(0.5, 2.0)
        par = GaborParams(lam, sig, normalize_unit=False)
        p = FeaturePoint(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 2 * math.pi))
        f = sample_filter(par, p, grid_for(p, sig, lam))
        target = sig**2 * math.pi
        assert abs(f.sq_norm - target) / target < 1e-6


def test_normalize_unit_rescales_exactly():
    par = GaborParams(1.0, 1.0, normalize_unit=True)
    f = sample_filter(par, FeaturePoint(0, 0, 0), RetinalGrid(-4, 4, -4, 4, 256, 256))
    assert f.sq_norm == 1.0
    assert abs(f.quadrature_sq_norm() - 1.0) < 1e-12


def test_grid_too_coarse():
    par = GaborParams(1.0, 1.0)
    with pytest.raises(GridTooCoarse):
        sample_filter(par, FeaturePoint(0, 0, 0), RetinalGrid(-4, 4, -4, 4, 41, 41))


def test_grid_too_small():
    par = GaborParams(1.0, 1.0)
    with pytest.raises(GridTooSmall):
        sample_filter(par, FeaturePoint(2, 0, 0), RetinalGrid(-4, 4, -4, 4, 256, 256))


def test_self_inner_matches_cached_norm():
    rng = np.random.default_rng(3)
    for _ in range(6):
        sig = rng.uniform(0.5, 1.5)
        lam = rng.uniform(0.5, 1.5)
        par = GaborParams(lam, sig, normalize_unit=bool(rng.integers(2)))
        p = FeaturePoint(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                         rng.uniform(0, 2 * math.pi))
        f = sample_filter(par, p, grid_for(p, sig, lam))
        val = l2_inner(f, f)
        assert abs(val.real - f.sq_norm) <= 1e-12 * f.sq_norm
        assert abs(val.imag) <= 1e-12 * f.sq_norm


def test_inner_product_spec_values():
    par = GaborParams(1.0, 1.0, normalize_unit=False)
    grid = RetinalGrid(-6, 7, -6, 6, 256, 256)
    f1 = sample_filter(par, FeaturePoint(1, 0, 0), grid)
    f0 = sample_filter(par, FeaturePoint(0, 0, 0), grid)
    val = l2_inner(f1, f0)
    assert val.real == pytest.approx(math.pi * math.exp(-0.25), rel=1e-6)

    fpi = sample_filter(par, FeaturePoint(0, 0, math.pi), grid)
    anti = l2_inner(fpi, f0)
    assert abs(anti.real) < 1e-10


def test_grid_mismatch():
    par = GaborParams(1.0, 1.0)
    f = sample_filter(par, FeaturePoint(0, 0, 0), RetinalGrid(-5, 5, -5, 5, 128, 128))
    g = sample_filter(par, FeaturePoint(0, 0, 0), RetinalGrid(-5, 5, -5, 5, 160, 160))
    with pytest.raises(GridMismatch):
        l2_inner(f, g)


def test_translation_invariance_of_inner_products():
    par = GaborParams(1.0, 1.0, normalize_unit=False)
    rng = np.random.default_rng(11)
    for _ in range(4):
        p = FeaturePoint(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, 6))
        p0 = FeaturePoint(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, 6))
        dx, dy = rng.uniform(-0.7, 0.7, size=2)
        ps = FeaturePoint(p.x + dx, p.y + dy, p.theta)
        p0s = FeaturePoint(p0.x + dx, p0.y + dy, p0.theta)
        grid = default_grid(par, [p, p0, ps, p0s], support_sigmas=6.0)
        base = l2_inner(sample_filter(par, p, grid), sample_filter(par, p0, grid))
        shifted = l2_inner(sample_filter(par, ps, grid), sample_filter(par, p0s, grid))
        assert abs(base - shifted) < 1e-8


def test_rotation_covariance_of_inner_products():
    # inner products depend on the pair only through the relative pose
    par = GaborParams(1.0, 1.0, normalize_unit=False)
    rng = np.random.default_rng(13)
    for _ in range(4):
        p = FeaturePoint(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0, 6))
        p0 = FeaturePoint(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0, 6))
        c, s = math.cos(p0.theta), math.sin(p0.theta)
        dx, dy = p.x - p0.x, p.y - p0.y
        rel = FeaturePoint(c * dx + s * dy, -s * dx + c * dy, p.theta - p0.theta)
        origin = FeaturePoint(0, 0, 0)
        grid = default_grid(par, [p, p0, rel, origin], support_sigmas=6.0)
        lhs = l2_inner(sample_filter(par, p, grid), sample_filter(par, p0, grid))
        rhs = l2_inner(sample_filter(par, rel, grid), sample_filter(par, origin, grid))
        assert abs(lhs - rhs) < 1e-8


def test_csv_roundtrip(tmp_path):
    from v1geom.io import write_csv

    par = GaborParams(1.0, 0.5)
    f = sample_filter(par, FeaturePoint(0, 0, 0.3), RetinalGrid(-3, 3, -3, 3, 64, 64))
    path = tmp_path / "filt.csv"
    write_csv(path, filter_to_csv_rows(f))
    g = read_filter_csv(path)
    assert g.grid == f.grid
    assert np.allclose(g.values, f.values, atol=1e-15)
    assert g.sq_norm == pytest.approx(f.sq_norm, rel=1e-12)


def test_pgm_export(tmp_path):
    from v1geom.io import write_pgm

    par = GaborParams(1.0, 0.5)
    f = sample_filter(par, FeaturePoint(0, 0, 0), RetinalGrid(-3, 3, -3, 3, 64, 64))
    path = tmp_path / "filt.pgm"
    write_pgm(path, f.values.real)
    text = path.read_text().splitlines()
    assert text[0] == "P2"
    assert text[1] == "64 64"
    assert text[2] == "255"
    pix = [int(t) for t in " ".join(text[3:]).split()]
    assert len(pix) == 64 * 64
    assert min(pix) >= 0 and max(pix) <= 255
