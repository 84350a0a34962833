"""Convex polygon signed distance and obstacle decomposition.

Signed distance is positive separation distance, negative minimum
translation to separate penetrating shapes, zero at contact.  Obstacles
are over-threshold map regions decomposed into non-overlapping axis
aligned rectangles (greedy maximal-rectangle merge).
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class ConvexPolygon:
    """Strictly convex planar polygon, vertices counter-clockwise."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if v.shape[0] < 3:
            raise ValueError("polygon needs at least 3 vertices")
        nxt = np.roll(v, -1, axis=0)
        prv = np.roll(v, 1, axis=0)
        cross = (v[:, 0] - prv[:, 0]) * (nxt[:, 1] - v[:, 1]) - (v[:, 1] - prv[:, 1]) * (nxt[:, 0] - v[:, 0])
        if np.any(cross <= 1e-12):
            raise ValueError("vertices must be strictly convex in CCW order")
        self.vertices = v
        self._finish()

    def _finish(self):
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        n = np.column_stack([e[:, 1], -e[:, 0]])
        self._normals = n / np.linalg.norm(n, axis=1, keepdims=True)
        self._centroid = v.mean(axis=0)
        d = v - self._centroid
        self._radius = float(np.max(np.hypot(d[:, 0], d[:, 1])))

    @classmethod
    def _trusted(cls, vertices):
        """Construction without convexity checks for internally-built shapes."""
        obj = cls.__new__(cls)
        obj.vertices = np.asarray(vertices, dtype=float)
        obj._finish()
        return obj

    @property
    def centroid(self):
        return self._centroid

    @property
    def radius(self):
        return self._radius

    def edge_normals(self):
        """Outward unit normals, one per edge (CCW winding)."""
        return self._normals

    def translated(self, offset):
        return ConvexPolygon._trusted(self.vertices + np.asarray(offset, dtype=float))


def rectangle(x0, y0, x1, y1):
    """Axis-aligned rectangle polygon from corner bounds."""
    if not (x1 > x0 and y1 > y0):
        raise ValueError("rectangle bounds must have positive extent")
    return ConvexPolygon._trusted(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))


def footprint_polygon(px, py, theta, length, width):
    """Robot footprint rectangle at pose (px, py, theta)."""
    c, s = np.cos(theta), np.sin(theta)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return ConvexPolygon._trusted(local @ rot.T + np.array([px, py]))


def polygons_intersect(a, b):
    """Exact convex intersection test (separating axis over edge normals).

    Touching boundaries count as intersecting.
    """
    return _max_axis_gap(a, b)[0] <= 0.0


def _max_axis_gap(a, b):
    """Largest signed separation over the edge-normal axes.

    Positive -> disjoint (SAT).  Also returns the translation of ``a``
    with the smallest magnitude that separates the shapes, as (push, axis)
    with push >= 0 meaning translate ``a`` by push*axis.
    """
    axes = np.vstack([a.edge_normals(), b.edge_normals()])
    pa = a.vertices @ axes.T   # (na, naxes)
    pb = b.vertices @ axes.T
    a_lo, a_hi = pa.min(axis=0), pa.max(axis=0)
    b_lo, b_hi = pb.min(axis=0), pb.max(axis=0)
    gap = np.maximum(b_lo - a_hi, a_lo - b_hi)
    best_gap = float(gap.max())
    push_pos = a_hi - b_lo    # translate a by -axis this much to separate
    push_neg = b_hi - a_lo    # translate a by +axis this much
    i_pos = int(np.argmin(push_pos))
    i_neg = int(np.argmin(push_neg))
    if push_pos[i_pos] <= push_neg[i_neg]:
        push, axis = float(push_pos[i_pos]), -axes[i_pos]
    else:
        push, axis = float(push_neg[i_neg]), axes[i_neg]
    return best_gap, push, axis


def _points_segments_min(points, verts):
    """Min distance from each of ``points`` to the closed polyline ``verts``.

    Returns (best distance, point index, projection point).
    """
    s0 = verts
    s1 = np.roll(verts, -1, axis=0)
    d = s1 - s0                                    # (ne, 2)
    denom = np.maximum((d * d).sum(axis=1), 1e-300)
    diff = points[:, None, :] - s0[None, :, :]     # (np, ne, 2)
    t = np.clip((diff * d[None, :, :]).sum(axis=2) / denom, 0.0, 1.0)
    proj = s0[None, :, :] + t[:, :, None] * d[None, :, :]
    dist = np.hypot(*(points[:, None, :] - proj).transpose(2, 0, 1))
    flat = int(np.argmin(dist))
    i, j = divmod(flat, verts.shape[0])
    return float(dist[i, j]), i, proj[i, j]


def signed_distance_witness(a, b):
    """Signed distance with witness points and separation direction.

    Returns (sd, pa, pb, normal) where ``normal`` is the unit direction
    along which translating ``a`` increases the signed distance.
    """
    if not isinstance(a, ConvexPolygon) or not isinstance(b, ConvexPolygon):
        raise ValueError("signed distance needs ConvexPolygon inputs")
    best_gap, push, axis = _max_axis_gap(a, b)
    if best_gap <= 0.0:
        pa = a.vertices[int(np.argmin(a.vertices @ axis))]
        pb = pa + push * axis
        return -push, pa, pb, axis
    d_ab, ia, proj_b = _points_segments_min(a.vertices, b.vertices)
    d_ba, ib, proj_a = _points_segments_min(b.vertices, a.vertices)
    if d_ab <= d_ba:
        best, pa, pb = d_ab, a.vertices[ia], proj_b
    else:
        best, pa, pb = d_ba, proj_a, b.vertices[ib]
    if best <= 1e-15:
        normal = pa - b.centroid
        nn = np.hypot(*normal)
        normal = normal / nn if nn > 0 else np.array([1.0, 0.0])
        return 0.0, pa, pb, normal
    normal = (pa - pb) / best
    return float(best), pa, pb, normal


def signed_distance(a, b):
    """Signed distance between two convex polygons (symmetric)."""
    return signed_distance_witness(a, b)[0]


def decompose_obstacles(cvar_layer, rho_max, origin=(0.0, 0.0), resolution=1.0,
                        window=None):
    """Cover the over-threshold cells with disjoint rectangles.

    Greedy maximal-rectangle merge: repeatedly grow the widest run from
    the first uncovered over-threshold cell, then extend it downward while
    full rows stay over threshold.  The union of rectangles covers exactly
    the cells with ``cvar > rho_max`` (restricted to ``window``, a
    (rmin, rmax, cmin, cmax) cell slice, when given).
    """
    if rho_max <= 0:
        raise ValueError("rho_max must be > 0")
    layer = np.asarray(cvar_layer, dtype=float)
    mask = np.zeros(layer.shape, dtype=bool)
    if window is None:
        sel = slice(None), slice(None)
    else:
        rmin, rmax, cmin, cmax = window
        sel = (slice(max(rmin, 0), min(rmax + 1, layer.shape[0])),
               slice(max(cmin, 0), min(cmax + 1, layer.shape[1])))
    with np.errstate(invalid="ignore"):
        mask[sel] = layer[sel] > rho_max
    remaining = mask.copy()
    polys = []
    h, w = mask.shape
    flat = remaining.ravel()
    while True:
        first = int(np.argmax(flat))
        if not flat[first]:
            break
        r0, c0 = divmod(first, w)
        c1 = c0
        while c1 + 1 < w and remaining[r0, c1 + 1]:
            c1 += 1
        r1 = r0
        while r1 + 1 < h and remaining[r1 + 1, c0 : c1 + 1].all():
            r1 += 1
        remaining[r0 : r1 + 1, c0 : c1 + 1] = False
        x0 = origin[0] + c0 * resolution
        x1 = origin[0] + (c1 + 1) * resolution
        y0 = origin[1] + r0 * resolution
        y1 = origin[1] + (r1 + 1) * resolution
        polys.append(rectangle(x0, y0, x1, y1))
    return polys
