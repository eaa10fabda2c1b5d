"""Experiment driver: every simulation in the package from one JSON config.

Each invocation runs a single named experiment, writes its outputs (plain
PGM images, CSV tables, JSON reports) plus a manifest.json echoing the
fully resolved configuration.  Re-running the same config and seed
reproduces every output byte for byte; feeding a manifest back in as the
config reproduces the run it describes.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import (
    PropagationParams,
    argmax_orientation,
    build_base_kernel,
    build_graph,
    calibrate_kappa,
    cl_normalize,
    default_r_cut,
    dirac_profile,
    heat_run,
    jaccard_index,
    patchiness_stats,
    propagate,
    second_moments,
    surface_restricted_distance,
    top_decile_mask,
)
from .errors import V1GeomError
from .filters import FeaturePoint, GaborParams
from .io import write_csv, write_json, write_pgm
from .measure import (
    ball_volume_table,
    gabor_measure,
    mcp_check,
    surface_measure,
)
from .metric import (
    FeatureGrid,
    MetricConfig,
    distance_many,
    field_csv_rows,
    kernel_field,
    limit_cometric,
    local_metric_tensor,
    metric_determinant,
    wrap_angle,
)
from .surface import generate_map, map_csv_rows


class ConfigError(Exception):
    """Invalid or incomplete run configuration."""


EXPERIMENTS = (
    "gabor_kernel",
    "gabor_propagate",
    "gabor_heat",
    "surface_propagate",
    "surface_heat",
    "mcp_sweep",
    "metric_report",
)

# (default, type) leaves; None default means experiment-dependent or optional
SCHEMA = {
    "experiment": (None, str),
    "seed": (0, int),
    "out_dir": ("run_out", str),
    "threads": (None, int),
    "filters": {
        "lam": (0.8, float),
        "sigma": (0.4, float),
    },
    "grid": {
        "x_min": (-1.5, float), "x_max": (1.5, float), "step_x": (0.075, float),
        "y_min": (-1.95, float), "y_max": (2.025, float), "step_y": (0.075, float),
        "theta_min": (-1.5, float), "theta_max": (1.5, float), "step_theta": (0.15, float),
    },
    "surface": {
        "x_min": (-2.0, float), "x_max": (2.0, float),
        "y_min": (-2.0, float), "y_max": (2.0, float),
        "step": (0.05, float),
        "n_waves": (30, int),
        "map_wavelength": (0.8, float),
    },
    "start_point": {
        "x": (0.0, float), "y": (0.0, float), "theta": (0.0, float),
    },
    "propagation": {
        "n_steps": (4, int),
        "activation": ("sigmoid", str),
        "threshold": (0.1, float),
        "alpha": (1.0, float),
        "r_cut": (None, float),
    },
    "heat": {
        "dt": (0.01, float),
        "n_iter": (None, int),
        "rho": (None, float),
        "kappa": (None, float),
        "kappa_mode": ("cfl", str),
        "cfl_fraction": (0.5, float),
    },
    "mcp": {
        "n_centers": (4, int),
        "center_box": (1.2, float),
        "radii": ([0.1, 0.2], list),
        "t_values": ([0.25, 0.5, 0.75], list),
        "theta_max": (4.0, float),
        "n_subcells": (10, int),
    },
    "metric": {
        "A": (1.0, float),
        "lambdas": ([0.1, 0.01, 0.001], list),
        "ball_radius": (0.45, float),
        "ball_cells": (14, int),
        "ball_radii_scale": ([0.6, 0.8, 1.0, 1.2], list),
    },
    "report": {
        "display_threshold": (0.1, float),
    },
}


def validate_config(raw: dict) -> dict:
    """Check fields against the schema, fill defaults, return the resolved config."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "config" in raw and "experiment" not in raw:
        raw = raw["config"]  # manifest round-trip
    errors: list[str] = []
    resolved = _merge(SCHEMA, raw, "", errors)
    exp = resolved.get("experiment")
    if exp is None:
        errors.append("missing required field: experiment")
    elif exp not in EXPERIMENTS:
        errors.append(f"experiment must be one of {', '.join(EXPERIMENTS)} (got {exp!r})")
    if errors:
        raise ConfigError("; ".join(errors))
    if resolved["heat"]["n_iter"] is None:
        resolved["heat"]["n_iter"] = 150 if exp == "surface_heat" else 100
    return resolved


def _merge(schema: dict, raw: dict, prefix: str, errors: list) -> dict:
    out = {}
    for key, spec in schema.items():
        path = f"{prefix}{key}"
        if isinstance(spec, dict):
            sub = raw.get(key, {})
            if not isinstance(sub, dict):
                errors.append(f"{path} must be an object")
                sub = {}
            out[key] = _merge(spec, sub, path + ".", errors)
        else:
            default, typ = spec
            if key in raw and raw[key] is not None:
                val = raw[key]
                try:
                    if typ is float:
                        val = float(val)
                    elif typ is int:
                        if isinstance(val, float) and not val.is_integer():
                            raise ValueError
                        val = int(val)
                    elif typ is list:
                        val = [float(v) for v in val]
                    elif typ is str and not isinstance(val, str):
                        raise ValueError
                except (TypeError, ValueError):
                    errors.append(f"{path} has invalid type (expected {typ.__name__})")
                    val = default
                out[key] = val
            else:
                out[key] = copy.deepcopy(default)
    for key in raw:
        if key not in schema:
            errors.append(f"unknown field: {prefix}{key}")
    return out


# ---------------------------------------------------------------------------
# shared pieces


def _params(cfg) -> GaborParams:
    return GaborParams(lam=cfg["filters"]["lam"], sigma=cfg["filters"]["sigma"],
                       normalize_unit=True)


def _grid(cfg) -> FeatureGrid:
    g = cfg["grid"]
    return FeatureGrid(g["x_min"], g["x_max"], g["step_x"],
                       g["y_min"], g["y_max"], g["step_y"],
                       g["theta_min"], g["theta_max"], g["step_theta"])


def _surface(cfg):
    s = cfg["surface"]
    return generate_map((s["x_min"], s["x_max"], s["y_min"], s["y_max"]), s["step"],
                        n_waves=s["n_waves"],
                        wavenumber=2.0 * math.pi / s["map_wavelength"],
                        seed=cfg["seed"])


def _start(cfg) -> FeaturePoint:
    p = cfg["start_point"]
    return FeaturePoint(p["x"], p["y"], p["theta"])


def _resolve_kappa(cfg, graph, d2_profile, center):
    """Pick the edge-weight constant and record it back into the config."""
    heat = cfg["heat"]
    if heat["kappa"] is not None:
        return float(heat["kappa"]), "explicit"
    if heat["kappa_mode"] == "calibrated":
        kappa, how = calibrate_kappa(graph, d2_profile, center), "calibrated"
    else:
        s1 = float((graph.row_mass / graph.mu).max())
        kappa, how = heat["cfl_fraction"] / (heat["dt"] * s1), "cfl"
    heat["kappa"] = kappa
    return kappa, how


def _resolve_r_cut(cfg, params) -> float:
    """Kernel cutoff for the propagation experiments.

    Defaults to two filter scales: tight enough to exclude the first
    oscillatory side lobe of the kernel, whose contribution spreads across
    the preferred axis (the same truncation the patch construction applies
    to the distance).  The resolved value is echoed into the manifest.
    """
    prop = cfg["propagation"]
    if prop["r_cut"] is None:
        prop["r_cut"] = 2.0 * params.sigma
    return float(prop["r_cut"])


def _resolve_rho(cfg, params) -> float:
    heat = cfg["heat"]
    if heat["rho"] is None:
        heat["rho"] = 0.75 * default_r_cut(params)
    return float(heat["rho"])


def _collinearity(theta_bar, max_val, grid, p0, threshold_frac, wraps):
    """Max |theta_bar - theta0| (in theta-steps) at above-threshold on-axis cells."""
    direction = (-math.sin(p0.theta), math.cos(p0.theta))
    xx, yy = np.meshgrid(grid.xs, grid.ys, indexing="ij")
    perp = -(xx - p0.x) * direction[1] + (yy - p0.y) * direction[0]
    on_axis = np.abs(perp) <= 0.5 * min(grid.step_x, grid.step_y)
    lit = max_val >= threshold_frac * max_val.max()
    sel = on_axis & lit
    if not sel.any():
        return {"n_cells": 0, "max_steps": None}
    dev = theta_bar[sel] - p0.theta
    if wraps:
        dev = wrap_angle(dev)
    steps = np.abs(dev) / grid.step_theta
    return {"n_cells": int(sel.sum()), "max_steps": float(steps.max())}


# ---------------------------------------------------------------------------
# experiments


def _exp_gabor_kernel(cfg, out: Path) -> list:
    params = _params(cfg)
    grid = _grid(cfg)
    p0 = _start(cfg)
    field = kernel_field(params, grid, p0)
    k0 = grid.locate(p0) % grid.ntheta
    write_pgm(out / "kernel_theta_slice.pgm", field[:, :, k0])
    write_csv(out / "kernel_field.csv", field_csv_rows(grid, field),
              header=["x", "y", "theta", "kernel"])
    dist = np.sqrt(np.maximum(2.0 - 2.0 * field, 0.0))
    write_csv(out / "distance_field.csv", field_csv_rows(grid, dist),
              header=["x", "y", "theta", "distance"])
    return ["kernel_theta_slice.pgm", "kernel_field.csv", "distance_field.csv"]


def _run_gabor_propagation(cfg):
    params = _params(cfg)
    grid = _grid(cfg)
    p0 = _start(cfg)
    prop = cfg["propagation"]
    kern = build_base_kernel(params, grid, r_cut=_resolve_r_cut(cfg, params),
                             activation=prop["activation"], threshold=prop["threshold"])
    mu = grid.cell_volume()
    S = cl_normalize(kern, alpha=prop["alpha"], node_measure=mu)
    del kern
    pp = PropagationParams(n_steps=prop["n_steps"], activation=prop["activation"],
                           threshold=prop["threshold"], alpha=prop["alpha"])
    f = propagate(S, grid.locate(p0), pp, node_measure=mu)
    return params, grid, p0, f.reshape(grid.nx, grid.ny, grid.ntheta)


def _exp_gabor_propagate(cfg, out: Path) -> list:
    params, grid, p0, field = _run_gabor_propagation(cfg)
    theta_bar, max_val = argmax_orientation(field, grid.thetas, p0.theta,
                                            wraps=grid.theta_wraps)
    write_pgm(out / "kernel_max_theta.pgm", max_val)
    rows = ((x, y, tb, mv) for (x, tb_row, mv_row) in zip(grid.xs, theta_bar, max_val)
            for (y, tb, mv) in zip(grid.ys, tb_row, mv_row))
    write_csv(out / "theta_bar.csv", rows, header=["x", "y", "theta_bar", "max_value"])
    direction = (-math.sin(p0.theta), math.cos(p0.theta))
    m_along, m_trans = second_moments(max_val, grid.xs, grid.ys, (p0.x, p0.y), direction)
    report = {
        "second_moment_along": m_along,
        "second_moment_transverse": m_trans,
        "elongation_ratio": m_along / m_trans if m_trans > 0 else math.inf,
        "collinearity": _collinearity(theta_bar, max_val, grid, p0,
                                      cfg["report"]["display_threshold"], grid.theta_wraps),
    }
    write_json(out / "report.json", report)
    return ["kernel_max_theta.pgm", "theta_bar.csv", "report.json"]


def _exp_gabor_heat(cfg, out: Path) -> list:
    params = _params(cfg)
    grid = _grid(cfg)
    p0 = _start(cfg)
    heat = cfg["heat"]
    rho = _resolve_rho(cfg, params)
    graph = build_graph(params, grid, rho=rho, kappa=1.0)
    center = grid.locate(p0)
    d2 = distance_many(params, grid.points(), (p0.x, p0.y, p0.theta)) ** 2
    kappa, _ = _resolve_kappa(cfg, graph, d2, center)
    graph = graph.scaled(kappa)
    state = heat_run(graph, dirac_profile(graph, center), heat["dt"], heat["n_iter"])
    field = state.f.reshape(grid.nx, grid.ny, grid.ntheta)
    theta_bar, max_val = argmax_orientation(field, grid.thetas, p0.theta,
                                            wraps=grid.theta_wraps)
    write_pgm(out / "heat_max_theta.pgm", max_val)
    rows = ((x, y, tb, mv) for (x, tb_row, mv_row) in zip(grid.xs, theta_bar, max_val)
            for (y, tb, mv) in zip(grid.ys, tb_row, mv_row))
    write_csv(out / "heat_theta_bar.csv", rows, header=["x", "y", "theta_bar", "max_value"])
    direction = (-math.sin(p0.theta), math.cos(p0.theta))
    m_along, m_trans = second_moments(max_val, grid.xs, grid.ys, (p0.x, p0.y), direction)
    report = {
        "rho": rho,
        "kappa": kappa,
        "mass_drift": float(abs((state.f * graph.mu).sum() - 1.0)),
        "min_value": float(state.f.min()),
        "second_moment_along": m_along,
        "second_moment_transverse": m_trans,
        "elongation_ratio": m_along / m_trans if m_trans > 0 else math.inf,
        "collinearity": _collinearity(theta_bar, max_val, grid, p0,
                                      cfg["report"]["display_threshold"], grid.theta_wraps),
    }
    write_json(out / "report.json", report)
    return ["heat_max_theta.pgm", "heat_theta_bar.csv", "report.json"]


def _surface_outputs(omap, out: Path) -> list:
    write_pgm(out / "map_theta.pgm", omap.theta_values, lo=0.0, hi=math.pi)
    write_csv(out / "map_theta.csv", map_csv_rows(omap), header=["x", "y", "theta"])
    write_json(out / "pinwheels.json", {
        "seed": omap.rng_seed,
        "threshold_fraction": 0.05,
        "cells": [list(map(int, c)) for c in omap.pinwheel_set],
    })
    return ["map_theta.pgm", "map_theta.csv", "pinwheels.json"]


def _run_surface_propagation(cfg):
    params = _params(cfg)
    omap = _surface(cfg)
    prop = cfg["propagation"]
    kern = build_base_kernel(params, omap, r_cut=_resolve_r_cut(cfg, params),
                             activation=prop["activation"], threshold=prop["threshold"])
    mu = omap.grid.cell_area()
    S = cl_normalize(kern, alpha=prop["alpha"], node_measure=mu)
    del kern
    p0 = _start(cfg)
    center = _surface_node(omap, p0)
    pp = PropagationParams(n_steps=prop["n_steps"], activation=prop["activation"],
                           threshold=prop["threshold"], alpha=prop["alpha"])
    f = propagate(S, center, pp, node_measure=mu)
    return params, omap, center, f.reshape(omap.grid.nx, omap.grid.ny)


def _surface_node(omap, p0) -> int:
    gx = omap.grid
    ix = int(round((p0.x - gx.x_min) / gx.step_x))
    iy = int(round((p0.y - gx.y_min) / gx.step_y))
    if not (0 <= ix < gx.nx and 0 <= iy < gx.ny):
        raise ConfigError("start point is outside the surface grid")
    return ix * gx.ny + iy


def _exp_surface_propagate(cfg, out: Path) -> list:
    params, omap, center, field = _run_surface_propagation(cfg)
    theta0 = float(omap.theta_values.ravel()[center])
    write_pgm(out / "surface_kernel.pgm", field)
    rows = ((x, y, v) for (x, row) in zip(omap.grid.xs, field)
            for (y, v) in zip(omap.grid.ys, row))
    write_csv(out / "surface_kernel.csv", rows, header=["x", "y", "value"])
    stats = patchiness_stats(omap, field, theta0)
    stats["theta0"] = theta0
    write_json(out / "report.json", stats)
    return _surface_outputs(omap, out) + ["surface_kernel.pgm", "surface_kernel.csv",
                                          "report.json"]


def _exp_surface_heat(cfg, out: Path) -> list:
    params = _params(cfg)
    omap = _surface(cfg)
    heat = cfg["heat"]
    rho = _resolve_rho(cfg, params)
    # seam curves of the mod-pi map are metrically far in the full-angle
    # kernel, so the surface graph is disconnected by construction; the
    # flow stays in the seed's component
    graph = build_graph(params, omap, rho=rho, kappa=1.0, require_connected=False)
    center = _surface_node(omap, _start(cfg))
    d2 = surface_restricted_distance(params, omap, center) ** 2
    kappa, _ = _resolve_kappa(cfg, graph, d2, center)
    graph = graph.scaled(kappa)
    state = heat_run(graph, dirac_profile(graph, center), heat["dt"], heat["n_iter"])
    field = state.f.reshape(omap.grid.nx, omap.grid.ny)
    theta0 = float(omap.theta_values.ravel()[center])
    write_pgm(out / "surface_heat.pgm", field)
    rows = ((x, y, v) for (x, row) in zip(omap.grid.xs, field)
            for (y, v) in zip(omap.grid.ys, row))
    write_csv(out / "surface_heat.csv", rows, header=["x", "y", "value"])
    stats = patchiness_stats(omap, field, theta0)
    stats.update({
        "theta0": theta0,
        "rho": rho,
        "kappa": kappa,
        "n_components": graph.n_components,
        "mass_drift": float(abs((state.f * graph.mu).sum() - 1.0)),
        "min_value": float(state.f.min()),
    })
    write_json(out / "report.json", stats)
    return _surface_outputs(omap, out) + ["surface_heat.pgm", "surface_heat.csv",
                                          "report.json"]


def _mcp_centers(cfg, omap):
    """Deterministic pinwheel-free sample of centers inside the center box."""
    rng = np.random.default_rng(cfg["seed"] + 1)
    box = cfg["mcp"]["center_box"]
    pw = omap.pinwheel_mask
    g = omap.grid
    centers = []
    attempts = 0
    while len(centers) < cfg["mcp"]["n_centers"] and attempts < 10_000:
        attempts += 1
        p = rng.uniform(-box, box, size=2)
        i = int((p[0] - g.x_min) / g.step_x)
        j = int((p[1] - g.y_min) / g.step_y)
        if not pw[max(0, i - 4):i + 5, max(0, j - 4):j + 5].any():
            centers.append(p)
    if not centers:
        raise V1GeomError("no pinwheel-free centers found")
    return centers


def _exp_mcp_sweep(cfg, out: Path) -> list:
    omap = _surface(cfg)
    spec = surface_measure(omap)
    mc = cfg["mcp"]
    centers = _mcp_centers(cfg, omap)
    report = mcp_check(spec, omap, centers, mc["radii"], mc["t_values"],
                       theta_max=mc["theta_max"], n_subcells=mc["n_subcells"])
    write_json(out / "mcp_report.json", report.to_dict())
    write_csv(out / "mcp_samples.csv",
              ((s["center"][0], s["center"][1], s["r"], s["t"], s["theta_required"])
               for s in report.samples),
              header=["center_x", "center_y", "r", "t", "theta_required"])
    return _surface_outputs(omap, out) + ["mcp_report.json", "mcp_samples.csv"]


def _exp_metric_report(cfg, out: Path) -> list:
    params = GaborParams(lam=cfg["filters"]["lam"], sigma=cfg["filters"]["sigma"],
                         normalize_unit=False)
    mcfg = MetricConfig(params)
    p0 = _start(cfg)
    tensor = local_metric_tensor(mcfg, p0)
    met = cfg["metric"]
    A = met["A"]
    cometric_rows = []
    for lam in met["lambdas"]:
        par = GaborParams(lam=lam, sigma=math.sqrt(A * lam), normalize_unit=False)
        g_inv = local_metric_tensor(MetricConfig(par), p0).g_inv
        err = float(np.abs(g_inv - limit_cometric(A, p0.theta)).max())
        cometric_rows.append((lam, err))
    spec = gabor_measure(mcfg)
    r0 = met["ball_radius"]
    sx = r0 / math.sqrt(tensor.g[0, 0])
    sy = r0 / math.sqrt(tensor.g[1, 1])
    st = r0 / math.sqrt(tensor.g[2, 2])
    cells = int(met["ball_cells"])
    pad = 1.3 * max(met["ball_radii_scale"])
    ball_grid = FeatureGrid(p0.x - pad * sx, p0.x + pad * sx, 2 * pad * sx / (2 * cells),
                            p0.y - pad * sy, p0.y + pad * sy, 2 * pad * sy / (2 * cells),
                            p0.theta - pad * st, p0.theta + pad * st, 2 * pad * st / (2 * cells))
    dist = lambda pts, x: distance_many(params, pts, x)
    radii = [s * r0 for s in met["ball_radii_scale"]]
    table = ball_volume_table(spec, dist, ball_grid, (p0.x, p0.y, p0.theta), radii)
    write_csv(out / "ball_volumes.csv", zip(table.radii, table.volumes),
              header=["radius", "volume"])
    write_json(out / "metric_report.json", {
        "g": tensor.g.tolist(),
        "g_inv": tensor.g_inv.tolist(),
        "det_g": float(np.linalg.det(tensor.g)),
        "det_g_closed_form": metric_determinant(mcfg),
        "cometric_errors": [{"lam": l, "max_entry_error": e} for l, e in cometric_rows],
        "ball_volumes": {"radii": table.radii, "volumes": table.volumes,
                         "monotone": table.is_monotone()},
    })
    return ["ball_volumes.csv", "metric_report.json"]


RUNNERS = {
    "gabor_kernel": _exp_gabor_kernel,
    "gabor_propagate": _exp_gabor_propagate,
    "gabor_heat": _exp_gabor_heat,
    "surface_propagate": _exp_surface_propagate,
    "surface_heat": _exp_surface_heat,
    "mcp_sweep": _exp_mcp_sweep,
    "metric_report": _exp_metric_report,
}


# ---------------------------------------------------------------------------
# driver


def run(config_path, out_dir=None, seed=None, threads=None) -> int:
    """Execute one experiment; returns the process exit code."""
    try:
        raw = json.loads(Path(config_path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        cfg = validate_config(raw)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    if threads is not None:
        cfg["threads"] = int(threads)
    if cfg["threads"]:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(cfg["threads"])

    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        outputs = RUNNERS[cfg["experiment"]](cfg, out)
    except V1GeomError as e:
        print(f"numeric failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    write_json(out / "manifest.json", {
        "config": cfg,
        "outputs": sorted(outputs),
        "package_version": __version__,
    })
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="v1geom",
                                 description="run one reproducible experiment")
    ap.add_argument("--config", required=True, help="JSON config (or manifest) path")
    ap.add_argument("--out", default=None, help="output directory (overrides config)")
    ap.add_argument("--seed", default=None, type=int, help="seed (overrides config)")
    ap.add_argument("--threads", default=None, type=int, help="thread cap for BLAS pools")
    args = ap.parse_args(argv)
    return run(args.config, out_dir=args.out, seed=args.seed, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
