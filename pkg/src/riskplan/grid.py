"""Uniform 2.5D belief grid holding named float layers.

Cells are indexed ``[row, col]`` with ``row`` along world y and ``col``
along world x.  Unknown cells carry NaN in value layers; counter layers
start at zero.  All layers of one map share origin, resolution and shape.
"""

import io
import json

import numpy as np

UNKNOWN = np.nan

# Value layers default to NaN (= never observed); accumulator layers to 0.
_ZERO_LAYERS = {
    "cover_count",
    "cover_mu_x",
    "cover_mu_y",
    "no_return_count",
    "return_count",
    "lethal",
    "obstacle",
}

SNAPSHOT_MAGIC = "riskplan-map-snapshot"


class BeliefGridMap:
    """Multi-layer 2.5D grid map.

    Parameters
    ----------
    origin : (float, float)
        World coordinates (m) of the lower-left corner of cell [0, 0].
    resolution : float
        Cell edge length in meters.
    width, height : int
        Cell counts along x (columns) and y (rows).
    layers : iterable of str, optional
        Layer names to allocate immediately.
    """

    def __init__(self, origin, resolution, width, height, layers=()):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        if width <= 0 or height <= 0:
            raise ValueError("grid dimensions must be positive")
        self.origin = (float(origin[0]), float(origin[1]))
        self.resolution = float(resolution)
        self.width = int(width)
        self.height = int(height)
        self.layers = {}
        for name in layers:
            self.add_layer(name)

    @property
    def shape(self):
        return (self.height, self.width)

    def add_layer(self, name, fill=None):
        if name in self.layers:
            return self.layers[name]
        if fill is None:
            fill = 0.0 if name in _ZERO_LAYERS else UNKNOWN
        arr = np.full(self.shape, fill, dtype=float)
        self.layers[name] = arr
        return arr

    def __getitem__(self, name):
        return self.layers[name]

    def __contains__(self, name):
        return name in self.layers

    def world_to_cell(self, x, y):
        """World (m) -> (row, col). Arrays broadcast; no bounds check."""
        col = np.floor((np.asarray(x) - self.origin[0]) / self.resolution).astype(int)
        row = np.floor((np.asarray(y) - self.origin[1]) / self.resolution).astype(int)
        return row, col

    def cell_to_world(self, row, col):
        """(row, col) -> world coordinates of the cell center."""
        x = self.origin[0] + (np.asarray(col) + 0.5) * self.resolution
        y = self.origin[1] + (np.asarray(row) + 0.5) * self.resolution
        return x, y

    def in_bounds(self, row, col):
        row = np.asarray(row)
        col = np.asarray(col)
        return (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)

    def copy(self):
        out = BeliefGridMap(self.origin, self.resolution, self.width, self.height)
        for name, arr in self.layers.items():
            out.layers[name] = arr.copy()
        return out


def save_snapshot(grid_map, path):
    """Write a self-describing snapshot that round-trips bit-exact.

    Layout: npz container with a JSON header (magic, origin, resolution,
    dims, layer names) plus one row-major float64 array per layer.
    """
    header = {
        "magic": SNAPSHOT_MAGIC,
        "origin": list(grid_map.origin),
        "resolution": grid_map.resolution,
        "width": grid_map.width,
        "height": grid_map.height,
        "layers": sorted(grid_map.layers),
    }
    arrays = {f"layer/{name}": np.ascontiguousarray(grid_map.layers[name]) for name in grid_map.layers}
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_snapshot(path):
    """Read a snapshot written by :func:`save_snapshot`."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("magic") != SNAPSHOT_MAGIC:
            raise ValueError(f"{path} is not a map snapshot")
        grid_map = BeliefGridMap(
            header["origin"], header["resolution"], header["width"], header["height"]
        )
        for name in header["layers"]:
            grid_map.layers[name] = np.array(data[f"layer/{name}"], dtype=float)
    return grid_map
