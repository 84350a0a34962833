"""Simplified range sensor over the truth world.

Cells within range and 2-D line of sight are observed: ground cells yield
noisy elevation points (noise growing linearly with range), wall cells
yield obstacle returns, pit/water cells yield no-return marks with their
surrounding intensity.  Localization is exact; the only corruption is the
configured measurement noise.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass
class NoiseConfig:
    sigma0: float = 0.005        # m elevation noise at zero range
    sigma_slope: float = 0.003   # m additional noise per meter of range
    intensity_sigma: float = 0.02
    var_floor: float = 1e-6

    def sigma(self, ranges):
        return self.sigma0 + self.sigma_slope * np.asarray(ranges, dtype=float)


@dataclass
class Observation:
    ground_points: np.ndarray       # (N, 5): x, y, z, age, variance
    obstacle_points: np.ndarray     # (M, 4): x, y, z, range
    no_return_mask: np.ndarray      # (H, W) bool
    return_mask: np.ndarray         # (H, W) bool
    intensity_mask: np.ndarray      # (H, W) bool
    intensity_values: np.ndarray    # values where intensity_mask
    unoccluded_mask: np.ndarray     # (H, W) bool, input to coverage
    visible_mask: np.ndarray        # (H, W) bool


def sensor_model(world, state, range_m, noise, rng):
    """Observe the world from the robot state; returns an Observation."""
    grid = world.grid
    h, w = grid.shape
    px, py = float(state[0]), float(state[1])
    r0, c0 = grid.world_to_cell(px, py)
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise ValueError("robot is outside the world")
    radius = int(np.floor(range_m / grid.resolution))
    blocking = grid["wall"] > 0.5
    vis = kernels.visibility_mask(blocking.astype(np.uint8), int(r0), int(c0), radius) > 0

    rows, cols = np.nonzero(vis)
    xs, ys = grid.cell_to_world(rows, cols)
    ranges = np.hypot(xs - px, ys - py)

    wall = blocking[rows, cols]
    no_ret = grid["no_return"][rows, cols] > 0.5
    ground = ~wall & ~no_ret

    sig = noise.sigma(ranges[ground])
    z = grid["elevation"][rows[ground], cols[ground]] + rng.normal(size=int(ground.sum())) * sig
    ground_points = np.column_stack([
        xs[ground], ys[ground], z, np.zeros(int(ground.sum())),
        np.maximum(sig**2, noise.var_floor),
    ])

    base = grid["elevation"][rows[wall], cols[wall]] - 1.5  # pre-stamp ground level
    obstacle_points = np.column_stack([
        xs[wall], ys[wall], base + 0.4, ranges[wall],
    ])

    no_return_mask = np.zeros((h, w), dtype=bool)
    no_return_mask[rows[no_ret], cols[no_ret]] = True
    return_mask = np.zeros((h, w), dtype=bool)
    return_mask[rows[~no_ret], cols[~no_ret]] = True

    intensity_mask = return_mask
    ivals = grid["intensity"][return_mask]
    ivals = np.clip(ivals + rng.normal(size=ivals.size) * noise.intensity_sigma, 0.0, 1.0)

    return Observation(
        ground_points=ground_points,
        obstacle_points=obstacle_points,
        no_return_mask=no_return_mask,
        return_mask=return_mask,
        intensity_mask=intensity_mask,
        intensity_values=ivals,
        unoccluded_mask=vis,
        visible_mask=vis,
    )
