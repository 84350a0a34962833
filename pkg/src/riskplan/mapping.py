"""Traversability risk layers over a belief grid map.

Builds per-factor Gaussian risk layers (step, slope, collision, negative
obstacle, water/mud) from filtered elevation and sensor returns, tracks
viewpoint coverage for negative-obstacle confidence, and aggregates the
factors into a per-cell CVaR layer plus lethal mask.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .cvar import cvar_gaussian
from .grid import BeliefGridMap

FACTORS = ("step", "slope", "collision", "negative_obstacle", "water")

#: Layers allocated on a fresh belief map.
MAP_LAYERS = (
    ["elevation", "elevation_var", "intensity", "cvar", "risk_mu", "risk_sigma"]
    + ["cover_count", "cover_mu_x", "cover_mu_y", "cover_mse"]
    + ["no_return_count", "return_count", "lethal", "obstacle"]
    + [f"risk_{f}_mu" for f in FACTORS]
    + [f"risk_{f}_sigma" for f in FACTORS]
    + [f"risk_{f}_lethal" for f in FACTORS]
)


@dataclass
class RiskFactorConfig:
    """Weights and thresholds for the traversability risk factors.

    Detection thresholds grow linearly with sensor range,
    thr(r) = thr0 + threshold_range_slope * r, reflecting how angular
    localization accuracy degrades a step-height measurement at distance.
    """

    weights: dict = field(default_factory=lambda: {
        "step": 0.3, "slope": 0.2, "collision": 0.2,
        "negative_obstacle": 0.2, "water": 0.1,
    })
    step_threshold: float = 0.10          # m, lethal height gap at range 0
    slope_threshold: float = 0.35         # rad, lethal inclination
    collision_band: tuple = (0.15, 0.80)  # m above ground counted as body hit
    collision_soft_radius: float = 0.6    # m, decaying risk skirt near hits
    coverage_distance: float = 1.0        # m, viewpoint spread for coverage
    intensity_cutoff: float = 0.3
    water_ring_cells: int = 2
    threshold_range_slope: float = math.tan(math.radians(0.06))  # per m range
    risk_sigma_range_slope: float = 0.01  # added sigma per meter of range
    sigma_mu_scale: float = 0.5   # hazard-proportional estimate uncertainty
    unknown_prior_mean: float = 0.05
    unknown_prior_sigma: float = 0.20
    baseline_mu: float = 0.0      # constant traversal cost on known cells
    lethal_cvar: float = 0.5
    safe_cvar: float = 0.05
    mud_risk_mean: float = 0.2
    mud_risk_sigma: float = 0.1
    negobs_covered_mean: float = 1.0
    negobs_covered_sigma: float = 0.05
    negobs_uncovered_mean: float = 0.2
    negobs_uncovered_sigma: float = 0.5
    base_sigma: float = 0.01
    staleness_timescale: float = 10.0     # s, age-based variance inflation

    def __post_init__(self):
        total = sum(self.weights.values())
        if not (np.isfinite(total) and total > 0):
            raise ValueError("factor weights must sum to a finite positive value")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("factor weights must be >= 0")
        for name in ("step_threshold", "slope_threshold", "coverage_distance", "intensity_cutoff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class CellRisk:
    """Gaussian per-cell traversability cost: mean, standard deviation.

    ``mu``/``sigma`` are scalars or same-shape arrays (NaN = unknown);
    ``lethal`` marks cells exceeding a hard threshold.
    """

    mu: np.ndarray
    sigma: np.ndarray
    lethal: np.ndarray | None = None

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        if np.any((sigma < 0) & np.isfinite(sigma)):
            raise ValueError("sigma must be >= 0")
        if np.any((mu < 0) & np.isfinite(mu)):
            raise ValueError("mu must be >= 0")


def new_belief_map(origin, resolution, width, height):
    """Allocate a belief map with the full risk layer set."""
    return BeliefGridMap(origin, resolution, width, height, layers=MAP_LAYERS)


def _cell_ranges(grid, sensor_xy):
    xs, ys = grid.cell_to_world(*np.meshgrid(np.arange(grid.height), np.arange(grid.width), indexing="ij"))
    return np.hypot(xs - sensor_xy[0], ys - sensor_xy[1])


# ---------------------------------------------------------------------------
# Elevation filtering
# ---------------------------------------------------------------------------


def elevation_update(grid, points, staleness_timescale=10.0):
    """Fuse labeled ground points into the elevation layers.

    ``points`` is an (N, 5) array of (x, y, z, age, variance).  Older
    points get their measurement variance inflated by (1 + age/tau) so
    recent measurements dominate.  Per cell this is a scalar Kalman
    filter; measurements commute, so the information form used here gives
    the same posterior as a timestamp-ordered sequential update.

    Returns the number of points dropped for falling outside the map.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 5)
    if np.any(pts[:, 3] < 0):
        raise ValueError("point ages must be >= 0")
    row, col = grid.world_to_cell(pts[:, 0], pts[:, 1])
    ok = grid.in_bounds(row, col)
    dropped = int((~ok).sum())
    if not ok.any():
        return dropped
    row, col = row[ok], col[ok]
    z = pts[ok, 2]
    var = pts[ok, 4] * (1.0 + pts[ok, 3] / staleness_timescale)
    var = np.maximum(var, 1e-12)

    flat = row * grid.width + col
    n_cells = grid.width * grid.height
    info = np.bincount(flat, weights=1.0 / var, minlength=n_cells)
    info_mean = np.bincount(flat, weights=z / var, minlength=n_cells)

    elev = grid["elevation"].ravel()
    evar = grid["elevation_var"].ravel()
    touched = info > 0
    known = np.isfinite(elev) & touched
    fresh = ~np.isfinite(elev) & touched

    prior_info = np.zeros(n_cells)
    prior_info[known] = 1.0 / np.maximum(evar[known], 1e-12)
    total_info = prior_info + info
    post_mean = np.where(touched, 0.0, elev)
    post_mean[known] = (elev[known] * prior_info[known] + info_mean[known]) / total_info[known]
    post_mean[fresh] = info_mean[fresh] / info[fresh]
    elev[touched] = post_mean[touched]
    evar[touched] = 1.0 / total_info[touched]
    return dropped


# ---------------------------------------------------------------------------
# Surface normals
# ---------------------------------------------------------------------------


def surface_normals(grid, footprint_radius):
    """Unit world-frame normals from a plane fit over the footprint disk.

    Writes ``normal_x/y/z`` layers (NaN where fewer than 3 known cells or
    the fit is degenerate) and returns the three arrays.
    """
    radius_cells = max(int(round(footprint_radius / grid.resolution)), 1)
    nx, ny, nz = kernels.plane_normals(grid["elevation"], radius_cells, grid.resolution)
    grid.add_layer("normal_x")[:] = nx
    grid.add_layer("normal_y")[:] = ny
    grid.add_layer("normal_z")[:] = nz
    return nx, ny, nz


# ---------------------------------------------------------------------------
# Geometry-based risk factors
# ---------------------------------------------------------------------------


def geometric_risk_layers(grid, obstacle_points, cfg, sensor_xy):
    """Step, slope and collision risk from elevation geometry and returns.

    ``obstacle_points`` is an (N, 4) array of (x, y, z, range).  Detection
    thresholds are range-adapted; risk variance inherits the elevation
    variance plus a range-proportional term.  Cells exceeding the lethal
    thresholds set the per-factor lethal layers.  Writes the
    ``risk_step/slope/collision_*`` layers and returns them as CellRisk.
    """
    res = grid.resolution
    ranges = _cell_ranges(grid, sensor_xy)
    thr = cfg.step_threshold + cfg.threshold_range_slope * ranges
    range_sigma = cfg.risk_sigma_range_slope * ranges
    evar = grid["elevation_var"]
    evar_safe = np.where(np.isfinite(evar), evar, 0.0)

    # step: max height gap to the 8 adjacent cells; the estimate gets less
    # certain both with range and with the hazard magnitude itself.  The
    # mean uses the base threshold (an unbiased severity everywhere);
    # only the lethal detection threshold grows with range.
    gap = kernels.max_adjacent_gap(grid["elevation"])
    step_mu = np.clip(gap / cfg.step_threshold, 0.0, 1.0)
    step_sigma = (np.sqrt(2.0 * evar_safe) / thr + range_sigma + cfg.base_sigma
                  + cfg.sigma_mu_scale * np.where(np.isfinite(step_mu), step_mu, 0.0))
    step_lethal = np.where(np.isfinite(gap), (gap > thr).astype(float), 0.0)
    step_sigma = np.where(np.isfinite(gap), step_sigma, np.nan)

    # slope: inclination of the fitted surface normal
    if "normal_z" not in grid:
        surface_normals(grid, footprint_radius=2 * res)
    nz = grid["normal_z"]
    incl = np.arccos(np.clip(nz, 0.0, 1.0))
    slope_mu = np.clip(incl / cfg.slope_threshold, 0.0, 1.0)
    slope_sigma = (np.sqrt(evar_safe) / (cfg.slope_threshold * max(res, 1e-6)) * 0.5
                   + range_sigma + cfg.base_sigma
                   + cfg.sigma_mu_scale * np.where(np.isfinite(slope_mu), slope_mu, 0.0))
    slope_lethal = np.where(np.isfinite(incl), (incl > cfg.slope_threshold).astype(float), 0.0)
    slope_sigma = np.where(np.isfinite(incl), slope_sigma, np.nan)

    # collision: returns inside the body height band above the ground
    pts = np.asarray(obstacle_points, dtype=float).reshape(-1, 4)
    hit = np.zeros(grid.shape)
    if pts.shape[0]:
        row, col = grid.world_to_cell(pts[:, 0], pts[:, 1])
        ok = grid.in_bounds(row, col)
        row, col, pz, pr = row[ok], col[ok], pts[ok, 2], pts[ok, 3]
        ground = grid["elevation"][row, col]
        ground = np.where(np.isfinite(ground), ground, 0.0)
        rel = pz - ground
        lo = cfg.collision_band[0] + cfg.threshold_range_slope * pr
        in_band = (rel > lo) & (rel < cfg.collision_band[1])
        np.add.at(hit, (row[in_band], col[in_band]), 1.0)
    occupied = hit > 0
    grid["obstacle"][:] = occupied.astype(float)
    if occupied.any():
        dist = ndimage.distance_transform_edt(~occupied) * res
        coll_mu = np.clip(1.0 - dist / cfg.collision_soft_radius, 0.0, 1.0)
    else:
        coll_mu = np.zeros(grid.shape)
    coll_sigma = np.sqrt(evar_safe) / max(cfg.collision_band[0], 1e-6) * 0.5 + range_sigma + cfg.base_sigma
    coll_lethal = occupied.astype(float)

    out = {}
    for name, mu, sigma, lethal in (
        ("step", step_mu, step_sigma, step_lethal),
        ("slope", slope_mu, slope_sigma, slope_lethal),
        ("collision", coll_mu, coll_sigma, coll_lethal),
    ):
        grid[f"risk_{name}_mu"][:] = mu
        grid[f"risk_{name}_sigma"][:] = sigma
        grid[f"risk_{name}_lethal"][:] = lethal
        out[name] = CellRisk(mu, sigma, lethal)
    return out


# ---------------------------------------------------------------------------
# Coverage accounting (viewpoint-spread evidence for negative obstacles)
# ---------------------------------------------------------------------------


def coverage_update(grid, state_xy, unoccluded_mask, d_cover):
    """Streaming coverage update from one observation pose.

    For every unoccluded cell: increment the observation count, update the
    running mean of observing positions, and recompute the spread measure
    MSE = (px-mu_x)^2 + (py-mu_y)^2 - d_cover^2.  Occluded cells get
    MSE = -d_cover^2.  A cell counts as sufficiently covered when
    MSE >= 0, i.e. it was seen from viewpoints spread at least d_cover
    apart from their running mean.
    """
    px, py = float(state_xy[0]), float(state_xy[1])
    unocc = np.asarray(unoccluded_mask, dtype=bool)
    if unocc.shape != grid.shape:
        raise ValueError("unoccluded mask shape mismatch")
    count = grid["cover_count"]
    mu_x = grid["cover_mu_x"]
    mu_y = grid["cover_mu_y"]
    mse = grid["cover_mse"]

    count[unocc] += 1.0
    mu_x[unocc] += (px - mu_x[unocc]) / count[unocc]
    mu_y[unocc] += (py - mu_y[unocc]) / count[unocc]
    mse[unocc] = (px - mu_x[unocc]) ** 2 + (py - mu_y[unocc]) ** 2 - d_cover**2
    mse[~unocc] = -d_cover**2
    return grid


# ---------------------------------------------------------------------------
# Confidence-based risk: negative obstacles
# ---------------------------------------------------------------------------


def negative_obstacle_risk(grid, cfg, sensor_xy, water_mask=None):
    """Risk for gap cells (no returns despite unoccluded viewing).

    Sufficiently covered gaps (MSE >= 0) get a lethal-level mean; gaps
    without coverage evidence get a low mean with high variance so that
    only a high risk level treats them as hazardous.  Variance grows with
    range from the sensor.  Cells classified as water are excluded here
    (the water factor owns them).
    """
    gap = (grid["return_count"] == 0) & (grid["no_return_count"] > 0)
    if water_mask is not None:
        gap = gap & ~water_mask
    covered = grid["cover_mse"] >= 0.0
    ranges = _cell_ranges(grid, sensor_xy)
    range_sigma = cfg.risk_sigma_range_slope * ranges

    mu = np.zeros(grid.shape)
    sigma = np.full(grid.shape, cfg.base_sigma) + range_sigma
    lethal = np.zeros(grid.shape)
    strong = gap & covered
    weak = gap & ~covered
    mu[strong] = cfg.negobs_covered_mean
    sigma[strong] = cfg.negobs_covered_sigma + range_sigma[strong]
    lethal[strong] = 1.0
    mu[weak] = cfg.negobs_uncovered_mean
    sigma[weak] = cfg.negobs_uncovered_sigma + range_sigma[weak]

    grid["risk_negative_obstacle_mu"][:] = mu
    grid["risk_negative_obstacle_sigma"][:] = sigma
    grid["risk_negative_obstacle_lethal"][:] = lethal
    return CellRisk(mu, sigma, lethal)


# ---------------------------------------------------------------------------
# Semantics-based risk: water / mud from return intensity
# ---------------------------------------------------------------------------


def semantic_water_risk(grid, cfg):
    """Water and mud risk from LiDAR return intensity.

    Gap cells whose surrounding-ring mean intensity falls below the cutoff
    are classified as deep water (lethal).  Non-gap cells with low
    intensity get the configured mud risk mean (non-lethal).  Returns the
    CellRisk layer and the boolean water mask.
    """
    gap = (grid["return_count"] == 0) & (grid["no_return_count"] > 0)
    intensity = grid["intensity"]
    known_int = np.isfinite(intensity)

    r = cfg.water_ring_cells
    size = 2 * r + 1
    ring = np.ones((size, size), dtype=bool)
    ring[r, r] = False
    vals = np.where(known_int, intensity, 0.0)
    ring_sum = ndimage.correlate(vals, ring.astype(float), mode="constant", cval=0.0)
    ring_n = ndimage.correlate(known_int.astype(float), ring.astype(float), mode="constant", cval=0.0)
    with np.errstate(invalid="ignore"):
        ring_mean = np.where(ring_n > 0, ring_sum / np.maximum(ring_n, 1.0), np.nan)

    water = gap & (ring_mean < cfg.intensity_cutoff)
    mud = ~gap & known_int & (intensity < cfg.intensity_cutoff)

    mu = np.zeros(grid.shape)
    sigma = np.full(grid.shape, cfg.base_sigma)
    lethal = np.zeros(grid.shape)
    mu[water] = cfg.negobs_covered_mean
    sigma[water] = cfg.negobs_covered_sigma
    lethal[water] = 1.0
    mu[mud] = cfg.mud_risk_mean
    sigma[mud] = cfg.mud_risk_sigma

    grid["risk_water_mu"][:] = mu
    grid["risk_water_sigma"][:] = sigma
    grid["risk_water_lethal"][:] = lethal
    return CellRisk(mu, sigma, lethal), water


# ---------------------------------------------------------------------------
# CVaR aggregation
# ---------------------------------------------------------------------------


def aggregate_cvar(factor_layers, cfg, alpha):
    """Combine per-factor Gaussian layers into a CVaR layer + lethal mask.

    The aggregate cost is the weighted sum mu = sum_l w_l mu_l (plus the
    configured constant baseline traversal cost, which keeps the expected
    cost positive) with variance sigma^2 = sum_l w_l^2 sigma_l^2
    (independent factors).  Factor cells with unknown mean/sigma fall
    back to the configured prior (mean small, sigma large) so unknown
    terrain grows expensive as alpha rises.  A cell is lethal when any
    factor flags it or the aggregate CVaR of a known cell exceeds the
    lethal threshold.

    Returns (cvar, mu, sigma, lethal) arrays.
    """
    shapes = {np.asarray(cr.mu).shape for cr in factor_layers.values()}
    if len(shapes) != 1:
        raise ValueError(f"factor layers have mismatched shapes: {shapes}")
    shape = shapes.pop()

    mu_acc = np.full(shape, cfg.baseline_mu)
    var_acc = np.zeros(shape)
    lethal = np.zeros(shape, dtype=bool)
    any_known = np.zeros(shape, dtype=bool)
    for name, cr in factor_layers.items():
        w = cfg.weights.get(name, 0.0)
        mu = np.asarray(cr.mu, dtype=float)
        sigma = np.asarray(cr.sigma, dtype=float)
        known = np.isfinite(mu) & np.isfinite(sigma)
        any_known |= known
        mu_f = np.where(known, mu, cfg.unknown_prior_mean)
        sg_f = np.where(known, sigma, cfg.unknown_prior_sigma)
        mu_acc += w * mu_f
        var_acc += w * w * sg_f * sg_f
        if cr.lethal is not None:
            lethal |= np.asarray(cr.lethal) > 0.5
    sigma_acc = np.sqrt(var_acc)
    cvar = cvar_gaussian(mu_acc, sigma_acc, alpha)
    lethal |= any_known & (cvar > cfg.lethal_cvar)
    return cvar, mu_acc, sigma_acc, lethal


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


class RiskMapper:
    """Maintains the belief map through per-cycle sensor updates.

    Single-writer: call :meth:`update` from one thread; the returned map
    snapshots are plain arrays safe to hand to planners read-only.
    """

    def __init__(self, origin, resolution, width, height, cfg=None, alpha=0.9,
                 footprint_radius=0.4):
        self.grid = new_belief_map(origin, resolution, width, height)
        self.cfg = cfg if cfg is not None else RiskFactorConfig()
        self.alpha = float(alpha)
        self.footprint_radius = footprint_radius
        self.dropped_points = 0

    def update(self, obs, sensor_xy):
        """Fold one observation into the map and refresh the CVaR layer.

        ``obs`` carries ground_points (N,5), obstacle_points (N,4),
        no_return cell mask, intensity samples (cells + values) and the
        unoccluded mask for coverage.
        """
        grid = self.grid
        self.dropped_points += elevation_update(
            grid, obs.ground_points, self.cfg.staleness_timescale
        )
        if obs.no_return_mask is not None:
            grid["no_return_count"][obs.no_return_mask] += 1.0
        if obs.return_mask is not None:
            grid["return_count"][obs.return_mask] += 1.0
        if obs.intensity_mask is not None:
            m = obs.intensity_mask
            known = np.isfinite(grid["intensity"][m])
            cur = grid["intensity"][m]
            grid["intensity"][m] = np.where(known, 0.5 * (cur + obs.intensity_values), obs.intensity_values)
        surface_normals(grid, self.footprint_radius)
        geometric_risk_layers(grid, obs.obstacle_points, self.cfg, sensor_xy)
        if obs.unoccluded_mask is not None:
            coverage_update(grid, sensor_xy, obs.unoccluded_mask, self.cfg.coverage_distance)
        water_risk, water_mask = semantic_water_risk(grid, self.cfg)
        negative_obstacle_risk(grid, self.cfg, sensor_xy, water_mask=water_mask)
        return self.refresh_cvar()

    def refresh_cvar(self, alpha=None):
        """Recompute the CVaR layer (e.g. after an alpha change)."""
        if alpha is not None:
            self.alpha = float(alpha)
        grid = self.grid
        factors = {
            name: CellRisk(
                grid[f"risk_{name}_mu"], grid[f"risk_{name}_sigma"], grid[f"risk_{name}_lethal"]
            )
            for name in FACTORS
        }
        cvar, mu, sigma, lethal = aggregate_cvar(factors, self.cfg, self.alpha)
        grid["cvar"][:] = cvar
        grid["risk_mu"][:] = mu
        grid["risk_sigma"][:] = sigma
        grid["lethal"][:] = lethal.astype(float)
        return grid
