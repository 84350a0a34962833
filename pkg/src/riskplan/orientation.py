"""Terrain-settled robot orientation and its gradient.

Pitch/roll of a robot settled on the surface come from the yaw-rotated
surface normal: omega = [atan2(n_x^r, n_z^r), -atan2(n_y^r, n_z^r)] with
n^r = R_theta n^w.  The gradient with respect to s = (px, py, theta)
splits into the normal-angle Jacobian, the yaw rotation, and the spatial
derivative of the world normal, the latter being second-order elevation
differences on the grid.
"""

import math

import numpy as np


class UnknownNormalError(ValueError):
    """Raised when the surface normal is not defined at the query point."""


def yaw_rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_rotation_deriv(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, c, 0.0], [-c, -s, 0.0], [0.0, 0.0, 0.0]])


def _angle_jacobian(nr):
    nx, ny, nz = nr
    dxz = nx * nx + nz * nz
    dyz = ny * ny + nz * nz
    return np.array([
        [nz / dxz, 0.0, -nx / dxz],
        [0.0, -nz / dyz, ny / dyz],
    ])


class NormalField:
    """Differentiable world surface normal field over an elevation grid.

    The elevation slopes a = dz/dx, b = dz/dy are central differences of
    the elevation layer, interpolated bilinearly between cell centers; the
    world normal is (-a, -b, 1) normalized.  Spatial derivatives of the
    normal use the analytic derivative of the bilinear interpolant.
    """

    def __init__(self, elevation, origin, resolution):
        elevation = np.asarray(elevation, dtype=float)
        if elevation.shape[0] < 2 or elevation.shape[1] < 2:
            raise ValueError("elevation grid too small for gradients")
        self.origin = (float(origin[0]), float(origin[1]))
        self.res = float(resolution)
        ddy, ddx = np.gradient(elevation, self.res)
        self.a = ddx
        self.b = ddy

    def _patch(self, x, y):
        h, w = self.a.shape
        u = (x - self.origin[0]) / self.res - 0.5
        v = (y - self.origin[1]) / self.res - 0.5
        u = min(max(u, 0.0), w - 1.0)
        v = min(max(v, 0.0), h - 1.0)
        c0 = min(max(int(math.floor(u)), 0), w - 2)
        r0 = min(max(int(math.floor(v)), 0), h - 2)
        return r0, c0, u - c0, v - r0

    def _interp_with_grad(self, layer, r0, c0, tx, ty):
        z00 = layer[r0, c0]
        z01 = layer[r0, c0 + 1]
        z10 = layer[r0 + 1, c0]
        z11 = layer[r0 + 1, c0 + 1]
        val = (1 - ty) * ((1 - tx) * z00 + tx * z01) + ty * ((1 - tx) * z10 + tx * z11)
        ddx = ((1 - ty) * (z01 - z00) + ty * (z11 - z10)) / self.res
        ddy = ((1 - tx) * (z10 - z00) + tx * (z11 - z01)) / self.res
        return val, ddx, ddy

    def normal_with_grad(self, x, y):
        """World normal n^w at (x, y) and its 3x2 spatial derivative."""
        r0, c0, tx, ty = self._patch(x, y)
        a, dax, day = self._interp_with_grad(self.a, r0, c0, tx, ty)
        b, dbx, dby = self._interp_with_grad(self.b, r0, c0, tx, ty)
        if not (np.isfinite(a) and np.isfinite(b)):
            raise UnknownNormalError(f"unknown surface normal at ({x:.3f}, {y:.3f})")
        v = np.array([-a, -b, 1.0])
        length = math.sqrt(1.0 + a * a + b * b)
        n = v / length
        # dn/da and dn/db, then chain through the interpolant gradients
        dv_da = np.array([-1.0, 0.0, 0.0])
        dv_db = np.array([0.0, -1.0, 0.0])
        dn_da = dv_da / length - v * (a / length**3)
        dn_db = dv_db / length - v * (b / length**3)
        grad = np.outer(dn_da, [dax, day]) + np.outer(dn_db, [dbx, dby])
        return n, grad

    def normal(self, x, y):
        return self.normal_with_grad(x, y)[0]

    def orientation_and_gradient(self, s):
        """Pitch/roll omega and the 2x3 gradient d omega / d (px, py, th).

        Raises :class:`UnknownNormalError` when the elevation neighborhood
        is unknown; callers drop the corresponding constraint.
        """
        px, py, theta = float(s[0]), float(s[1]), float(s[2])
        nw, dnw = self.normal_with_grad(px, py)
        R = yaw_rotation(theta)
        nr = R @ nw
        omega = np.array([math.atan2(nr[0], nr[2]), -math.atan2(nr[1], nr[2])])
        G = _angle_jacobian(nr)
        grad_p = G @ R @ dnw                       # 2x2
        grad_th = G @ yaw_rotation_deriv(theta) @ nw  # 2,
        return omega, np.column_stack([grad_p, grad_th])
