"""Risk-minimizing geometric planning on the CVaR layer.

A* over the 8-connected grid minimizing the compounded path risk (sum of
per-cell CVaR, first cell charged its mean only) plus a length penalty
lambda * sum ||x_k - x_{k+1}||^2.  Lethal cells are excluded outright.
"""

import heapq
from dataclasses import dataclass

import numpy as np

from . import kernels
from .accel import NUMBA_ENABLED
from .cvar import cvar_tail_factor

_SQRT2 = float(np.sqrt(2.0))

# 8-connected neighborhood and step lengths in cells
_NBRS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
_NBR_LEN = [_SQRT2, 1.0, _SQRT2, 1.0, 1.0, _SQRT2, 1.0, _SQRT2]


@dataclass
class GeometricPath:
    """Planned cell path with its cost breakdown."""

    waypoints: np.ndarray       # (N, 2) world xy of cell centers
    cells: np.ndarray           # (N, 2) row, col
    total_risk_cost: float      # compounded CVaR along the path
    total_length: float         # meters
    cell_cvar: np.ndarray       # (N,) per-cell CVaR values
    cost: float                 # risk + weighted length objective


def path_risk(cells, mu_layer, sigma_layer, alpha):
    """Compounded dynamic risk of a cell path.

    Equals mu_0 + sum_{k>=1} [mu_k + sigma_k * tail_factor(alpha)]: the
    nested one-step CVaR recursion telescopes to per-cell CVaR sums for
    Gaussian layers, with the first (current) cell contributing its mean.
    """
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    h, w = mu_layer.shape
    if np.any(cells[:, 0] < 0) or np.any(cells[:, 0] >= h) or np.any(cells[:, 1] < 0) or np.any(cells[:, 1] >= w):
        raise ValueError("path waypoint off the map")
    mu = mu_layer[cells[:, 0], cells[:, 1]]
    sigma = sigma_layer[cells[:, 0], cells[:, 1]]
    if np.any(~np.isfinite(mu)) or np.any(~np.isfinite(sigma)):
        raise ValueError("path crosses unknown cells")
    factor = cvar_tail_factor(alpha)
    total = float(mu[0])
    if cells.shape[0] > 1:
        total += float(np.sum(mu[1:] + sigma[1:] * factor))
    return total


def _octile_heuristic(r, c, goal_r, goal_c, lam, res, squared, cvar_floor):
    dr = abs(r - goal_r)
    dc = abs(c - goal_c)
    diag = dr if dr < dc else dc
    cheb = dr if dr > dc else dc
    straight = cheb - diag
    # every remaining step enters a cell costing at least cvar_floor
    risk = cheb * cvar_floor
    if squared:
        # min sum of squared step lengths: diagonals cost 2 res^2 each
        return lam * res * res * (2.0 * diag + straight) + risk
    return lam * res * (_SQRT2 * diag + straight) + risk


def _astar_python(cvar, lethal, sr, sc, gr, gc, lam, res, squared_length,
                  heuristic, cvar_floor, mu0):
    """Pure-python A* (heapq) used when numba acceleration is off."""
    h, w = cvar.shape

    if heuristic == "none":
        def hfun(r, c):
            return 0.0
    elif heuristic == "euclidean_sq":
        def hfun(r, c):
            d2 = ((r - gr) ** 2 + (c - gc) ** 2) * res * res
            return lam * d2 if squared_length else lam * np.sqrt(d2)
    else:
        def hfun(r, c):
            return _octile_heuristic(r, c, gr, gc, lam, res, squared_length, cvar_floor)

    g_cost = np.full((h, w), np.inf)
    parent = np.full((h, w), -1, dtype=np.int64)
    closed = np.zeros((h, w), dtype=bool)
    g_cost[sr, sc] = mu0
    # tie-break: lower heuristic first, then row-major index
    open_heap = [(mu0 + hfun(sr, sc), hfun(sr, sc), sr * w + sc)]

    step_costs = [
        lam * (d * res) ** 2 if squared_length else lam * d * res for d in _NBR_LEN
    ]

    while open_heap:
        f, hh, idx = heapq.heappop(open_heap)
        r, c = divmod(idx, w)
        if closed[r, c]:
            continue
        closed[r, c] = True
        if r == gr and c == gc:
            break
        base = g_cost[r, c]
        for (dr, dc), sc_len in zip(_NBRS, step_costs):
            rr, cc = r + dr, c + dc
            if rr < 0 or rr >= h or cc < 0 or cc >= w:
                continue
            if closed[rr, cc] or lethal[rr, cc] > 0.5:
                continue
            v = cvar[rr, cc]
            if not np.isfinite(v):
                continue
            cand = base + v + sc_len
            if cand < g_cost[rr, cc]:
                g_cost[rr, cc] = cand
                parent[rr, cc] = idx
                hv = hfun(rr, cc)
                heapq.heappush(open_heap, (cand + hv, hv, rr * w + cc))

    if not closed[gr, gc]:
        return None
    return g_cost, parent


def plan_astar(grid, start, goal, lam=0.01, heuristic="octile", squared_length=True,
               cvar_layer=None, lethal_layer=None, mu_layer=None):
    """A* search on the CVaR layer.

    Parameters
    ----------
    grid : BeliefGridMap
        Map snapshot with ``cvar``, ``lethal`` and ``risk_mu`` layers
        (individual layers can be overridden via keyword arguments).
    start, goal : (int, int)
        Cells as (row, col).
    lam : float
        Length weight (cost per m^2 in squared mode), small by default so
        risk dominates.
    heuristic : str
        "octile" (default, admissible lower bound of the remaining length
        cost), "euclidean_sq" (lam*||x-goal||^2; can overestimate for
        multi-step remainders and is kept only as an option), or "none".
    squared_length : bool
        Charge lam*step^2 per step (default) or lam*step.

    Returns the optimal :class:`GeometricPath`, or None when the goal is
    unreachable.
    """
    cvar = grid["cvar"] if cvar_layer is None else cvar_layer
    lethal = grid["lethal"] if lethal_layer is None else lethal_layer
    mu = mu_layer
    if mu is None:
        mu = grid["risk_mu"] if "risk_mu" in grid else cvar
    res = grid.resolution
    h, w = cvar.shape

    sr, sc = int(start[0]), int(start[1])
    gr, gc = int(goal[0]), int(goal[1])
    for name, (r, c) in (("start", (sr, sc)), ("goal", (gr, gc))):
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"{name} cell off the map")
        if lethal[r, c] > 0.5:
            raise ValueError(f"{name} cell is lethal")
        if not np.isfinite(cvar[r, c]):
            raise ValueError(f"{name} cell is unknown")

    cvar_floor = 0.0
    if heuristic == "octile":
        finite = cvar[np.isfinite(cvar)]
        cvar_floor = max(float(finite.min()), 0.0) if finite.size else 0.0
    elif heuristic not in ("none", "euclidean_sq"):
        raise ValueError(f"unknown heuristic {heuristic!r}")
    mu0 = float(mu[sr, sc])

    if NUMBA_ENABLED:
        hmode = {"none": 0, "octile": 1, "euclidean_sq": 2}[heuristic]
        g_flat, parent_flat, found = kernels._astar_loop(
            np.ascontiguousarray(cvar, dtype=float),
            np.ascontiguousarray(lethal, dtype=float),
            sr, sc, gr, gc, float(lam), float(res), bool(squared_length),
            hmode, cvar_floor, mu0,
        )
        if not found:
            return None
        g_cost = g_flat.reshape(h, w)
        parent = parent_flat.reshape(h, w)
    else:
        result = _astar_python(cvar, lethal, sr, sc, gr, gc, lam, res,
                               squared_length, heuristic, cvar_floor, mu0)
        if result is None:
            return None
        g_cost, parent = result

    cells = []
    idx = gr * w + gc
    while idx >= 0:
        r, c = divmod(idx, w)
        cells.append((r, c))
        idx = parent[r, c]
    cells.reverse()
    cells = np.array(cells, dtype=int)
    xs, ys = grid.cell_to_world(cells[:, 0], cells[:, 1])
    waypoints = np.column_stack([xs, ys])
    seg = np.diff(waypoints, axis=0)
    length = float(np.sum(np.hypot(seg[:, 0], seg[:, 1])))
    cell_cvar = cvar[cells[:, 0], cells[:, 1]]
    risk_cost = float(mu[sr, sc]) + float(cell_cvar[1:].sum())
    return GeometricPath(
        waypoints=waypoints,
        cells=cells,
        total_risk_cost=risk_cost,
        total_length=length,
        cell_cvar=np.asarray(cell_cvar, dtype=float),
        cost=float(g_cost[gr, gc]),
    )
