"""Synthetic ground-truth worlds for closed-loop simulation.

A world carries true elevation (a spatially correlated hazard field
expressed as surface roughness, so sub-lethal step hazards emerge
geometrically), stamped hazard primitives (walls, pits, water, ramps,
low ceilings, rubble), and derived truth layers: per-cell risk value in
[0, 1] and the lethal mask.  The continuous field is scaled strictly
below the lethal step threshold; lethality comes from the primitives,
with the rubble budget calibrated so the requested fraction of cells is
lethal overall.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .grid import BeliefGridMap


@dataclass
class WorldSpec:
    seed: int = 0
    size: tuple = (50.0, 50.0)       # meters (x, y)
    resolution: float = 0.2
    correlation_length: float = 1.0  # m, hazard field smoothness
    lethal_fraction: float = 0.05
    step_threshold: float = 0.10     # must match the mapper's lethal gap
    field_risk_cap: float = 0.85     # sub-lethal field tops out here
    field_risk_quantile: float = 0.97
    n_walls: int = 2
    wall_length: tuple = (2.0, 6.0)  # m
    n_pits: int = 1
    n_water: int = 1
    patch_radius: tuple = (0.4, 0.9)  # m
    n_ramps: int = 1
    ramp_slope: float = 0.15         # rise per meter
    n_low_ceilings: int = 0
    ceiling_deficit: float = 0.10    # m of crouch-range clearance deficit
    start: tuple | None = None       # world xy; defaults to the map center
    goal_distance: float = 8.0
    carve_radius: float = 0.8        # m kept hazard-free around start/goal
    max_goal_retries: int = 50
    base_intensity: float = 0.8
    water_intensity: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lethal_fraction < 1.0:
            raise ValueError("lethal fraction must lie in [0, 1)")


@dataclass
class TruthWorld:
    grid: BeliefGridMap
    start: tuple
    goal: tuple
    spec: WorldSpec
    lethal_count: int = 0

    @property
    def shape(self):
        return self.grid.shape


TRUTH_LAYERS = (
    "elevation", "hazard", "risk", "lethal", "wall", "no_return",
    "water", "intensity", "ceiling_deficit",
)


def _stamp_disk(mask, grid, cx, cy, radius):
    r0, c0 = grid.world_to_cell(cx, cy)
    k = int(np.ceil(radius / grid.resolution))
    h, w = grid.shape
    rows = np.arange(max(r0 - k, 0), min(r0 + k + 1, h))
    cols = np.arange(max(c0 - k, 0), min(c0 + k + 1, w))
    if not len(rows) or not len(cols):
        return
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    xs, ys = grid.cell_to_world(rr, cc)
    inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    mask[rr[inside], cc[inside]] = True


def _stamp_wall(mask, grid, x0, y0, angle, length):
    n = max(int(np.ceil(length / grid.resolution)) * 2, 2)
    ts = np.linspace(0.0, length, n)
    xs = x0 + np.cos(angle) * ts
    ys = y0 + np.sin(angle) * ts
    row, col = grid.world_to_cell(xs, ys)
    ok = grid.in_bounds(row, col)
    mask[row[ok], col[ok]] = True


def _lethal_mask(grid, thr):
    gaps = kernels.max_adjacent_gap(grid["elevation"])
    gaps = np.where(np.isfinite(gaps), gaps, 0.0)
    return gaps, (gaps > thr) | (grid["wall"] > 0.5) | (grid["no_return"] > 0.5)


def gen_world(spec):
    """Deterministically generate the ground-truth world for a spec."""
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution
    width = int(round(spec.size[0] / res))
    height = int(round(spec.size[1] / res))
    grid = BeliefGridMap((0.0, 0.0), res, width, height, layers=TRUTH_LAYERS)
    for name in TRUTH_LAYERS:
        grid[name][:] = 0.0
    grid["intensity"][:] = spec.base_intensity

    start = spec.start if spec.start is not None else (spec.size[0] / 2.0, spec.size[1] / 2.0)
    goal = _sample_goal(rng, spec, start)
    xs_g, ys_g = grid.cell_to_world(*np.meshgrid(np.arange(height), np.arange(width), indexing="ij"))

    # correlated hazard field, clipped at zero
    sigma_cells = max(spec.correlation_length / res, 1e-6)
    noise = rng.standard_normal((height, width))
    hazard = ndimage.gaussian_filter(noise, sigma=sigma_cells)
    sd = hazard.std()
    hazard = np.clip(hazard / (sd if sd > 0 else 1.0), 0.0, None)
    grid["hazard"][:] = hazard

    # hazard-scaled roughness -> step hazards; keep start/goal pockets clean
    # with a smooth taper so the carve boundary itself never forms a step
    rough = rng.uniform(-1.0, 1.0, size=(height, width))
    bumps = hazard * rough
    taper = np.ones((height, width))
    for cx, cy in (start, goal):
        r = np.hypot(xs_g - cx, ys_g - cy)
        w_local = np.clip((r - spec.carve_radius) / max(spec.carve_radius, 1e-6), 0.0, 1.0)
        taper = np.minimum(taper, w_local)
    bumps *= taper
    carve = taper < 1.0

    # ramps: gentle elevation trends, tapered to zero at the rim so the
    # disk boundary itself is smooth
    elev = np.zeros((height, width))
    for _ in range(spec.n_ramps):
        cx = rng.uniform(0.2, 0.8) * spec.size[0]
        cy = rng.uniform(0.2, 0.8) * spec.size[1]
        ang = rng.uniform(0, 2 * np.pi)
        radius = rng.uniform(1.5, 3.0)
        r = np.hypot(xs_g - cx, ys_g - cy)
        rim = np.clip((radius - r) / (0.4 * radius), 0.0, 1.0)
        rampz = spec.ramp_slope * ((xs_g - cx) * np.cos(ang) + (ys_g - cy) * np.sin(ang))
        elev += rampz * rim

    # scale the continuous field strictly sub-lethal: its upper quantile
    # sits at field_risk_cap of the step threshold and nothing crosses
    # 0.95 x threshold, so hazard detection never flickers at the boundary
    unit_gap = kernels.max_adjacent_gap(bumps)
    unit_gap = np.where(np.isfinite(unit_gap), unit_gap, 0.0)
    if unit_gap.max() > 0:
        q = np.quantile(unit_gap, spec.field_risk_quantile)
        scale = spec.field_risk_cap * spec.step_threshold / max(q, 1e-9)
        over = unit_gap * scale > 0.95 * spec.step_threshold
        shrink = (0.95 * spec.step_threshold) / np.maximum(unit_gap * scale, 1e-9)
        bumps[over] *= shrink[over]
        elev += bumps * scale
    grid["elevation"][:] = elev

    wall = grid["wall"].astype(bool)
    for _ in range(spec.n_walls):
        x0 = rng.uniform(0.1, 0.9) * spec.size[0]
        y0 = rng.uniform(0.1, 0.9) * spec.size[1]
        stamp = np.zeros((height, width), dtype=bool)
        _stamp_wall(stamp, grid, x0, y0, rng.uniform(0, np.pi),
                    rng.uniform(*spec.wall_length))
        stamp &= ~carve
        wall |= stamp
    grid["wall"][:] = wall.astype(float)
    grid["elevation"][wall] += 1.5

    no_return = grid["no_return"].astype(bool)
    water = grid["water"].astype(bool)
    for kind in ("pit",) * spec.n_pits + ("water",) * spec.n_water:
        cx = rng.uniform(0.1, 0.9) * spec.size[0]
        cy = rng.uniform(0.1, 0.9) * spec.size[1]
        stamp = np.zeros((height, width), dtype=bool)
        _stamp_disk(stamp, grid, cx, cy, rng.uniform(*spec.patch_radius))
        stamp &= ~carve & ~wall
        no_return |= stamp
        if kind == "water":
            water |= stamp
            ring = ndimage.binary_dilation(stamp, iterations=3)
            grid["intensity"][ring] = spec.water_intensity
    grid["no_return"][:] = no_return.astype(float)
    grid["water"][:] = water.astype(float)

    for _ in range(spec.n_low_ceilings):
        cx = rng.uniform(0.2, 0.8) * spec.size[0]
        cy = rng.uniform(0.2, 0.8) * spec.size[1]
        stamp = np.zeros((height, width), dtype=bool)
        _stamp_disk(stamp, grid, cx, cy, rng.uniform(0.8, 1.5))
        grid["ceiling_deficit"][stamp] = spec.ceiling_deficit

    _calibrate_rubble(rng, grid, spec, hazard, carve)

    gaps, lethal = _lethal_mask(grid, spec.step_threshold)
    risk = np.clip(gaps / spec.step_threshold, 0.0, 1.0)
    risk[lethal] = 1.0
    grid["lethal"][:] = lethal.astype(float)
    grid["risk"][:] = risk

    world = TruthWorld(grid=grid, start=tuple(start), goal=tuple(goal), spec=spec,
                       lethal_count=int(lethal.sum()))
    _ensure_endpoints_clear(world)
    return world


def _calibrate_rubble(rng, grid, spec, hazard, carve):
    """Jumble the most hazardous cells until the lethal budget is met.

    Binary search on the jumbled-cell fraction: jumbling a cell makes its
    own and its neighbors' step gaps super-threshold, so the lethal count
    is monotone in the fraction and lands within a few cells of target.
    """
    height, width = grid.shape
    target = spec.lethal_fraction * height * width
    if target <= 0:
        return
    _, base = _lethal_mask(grid, spec.step_threshold)
    if base.sum() >= target:
        return
    jumble = rng.uniform(1.0, 2.0, size=(height, width)) * 2.0 * spec.step_threshold
    jumble *= np.where(rng.uniform(size=(height, width)) < 0.5, -1.0, 1.0)
    # strict hazard-based ordering of candidate cells (random tie-break)
    order_key = hazard + 1e-9 * rng.uniform(size=hazard.shape)
    order_key[carve] = -np.inf
    order_key[grid["wall"] > 0.5] = -np.inf
    order_key[grid["no_return"] > 0.5] = -np.inf
    flat_order = np.argsort(order_key.ravel())[::-1]
    base_elev = grid["elevation"].copy()

    def lethal_count(n_cells):
        elev = base_elev.copy()
        idx = flat_order[:n_cells]
        elev.ravel()[idx] += jumble.ravel()[idx]
        grid["elevation"][:] = elev
        return int(_lethal_mask(grid, spec.step_threshold)[1].sum())

    lo, hi = 0, int(min(3 * target, height * width))
    if lethal_count(hi) < target:
        return  # saturated; keep the max
    for _ in range(24):
        mid = (lo + hi) // 2
        if lethal_count(mid) >= target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1:
            break
    lethal_count(hi)


def _sample_goal(rng, spec, start):
    for _ in range(spec.max_goal_retries):
        ang = rng.uniform(0, 2 * np.pi)
        gx = start[0] + spec.goal_distance * np.cos(ang)
        gy = start[1] + spec.goal_distance * np.sin(ang)
        margin = spec.carve_radius + spec.resolution
        if margin <= gx <= spec.size[0] - margin and margin <= gy <= spec.size[1] - margin:
            return (gx, gy)
    # fall back to a straight east goal clamped into the map
    gx = min(max(start[0] + spec.goal_distance, spec.carve_radius),
             spec.size[0] - spec.carve_radius)
    return (gx, start[1])


def _ensure_endpoints_clear(world):
    grid = world.grid
    for name, (x, y) in (("start", world.start), ("goal", world.goal)):
        r, c = grid.world_to_cell(x, y)
        if grid["lethal"][r, c] > 0.5:
            raise RuntimeError(f"world generation left the {name} cell lethal")


def truth_risk_at(world, x, y):
    """Truth risk value of the cell containing (x, y); 1.0 outside the map."""
    r, c = world.grid.world_to_cell(x, y)
    if not world.grid.in_bounds(r, c):
        return 1.0
    return float(world.grid["risk"][int(r), int(c)])
