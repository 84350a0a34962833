"""Hot numeric kernels with numba and pure-numpy implementations.

Every public function here dispatches between an ``@njit`` loop kernel and
a vectorized (or plain-python) numpy fallback depending on the
``RISKPLAN_NUMBA`` environment flag (see :mod:`riskplan.accel`).  Both
paths compute the same quantities; the loop kernels exist because these
routines dominate closed-loop simulation time.  ``benchmarks/bench_accel.py``
times the pairs against each other.
"""

import numpy as np

from .accel import NUMBA_ENABLED, njit

# ---------------------------------------------------------------------------
# 2-D grid line of sight (midpoint-sampled integer lines)
#
# A target cell is visible from (r0, c0) if no blocking cell lies strictly
# between them.  Intermediate samples use round-half-up integer arithmetic,
# floor((2*d*i + n) / (2*n)), so the two implementations are bit-identical.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _visibility_loop(blocking, r0, c0, radius):
    h, w = blocking.shape
    out = np.zeros((h, w), dtype=np.uint8)
    rad2 = radius * radius
    rmin = max(r0 - radius, 0)
    rmax = min(r0 + radius, h - 1)
    cmin = max(c0 - radius, 0)
    cmax = min(c0 + radius, w - 1)
    for r in range(rmin, rmax + 1):
        for c in range(cmin, cmax + 1):
            dr = r - r0
            dc = c - c0
            if dr * dr + dc * dc > rad2:
                continue
            n = max(abs(dr), abs(dc))
            vis = True
            for i in range(1, n):
                rr = r0 + (2 * dr * i + n) // (2 * n)
                cc = c0 + (2 * dc * i + n) // (2 * n)
                if blocking[rr, cc]:
                    vis = False
                    break
            if vis:
                out[r, c] = 1
    return out


def _visibility_numpy(blocking, r0, c0, radius):
    h, w = blocking.shape
    out = np.zeros((h, w), dtype=np.uint8)
    rows = np.arange(max(r0 - radius, 0), min(r0 + radius, h - 1) + 1)
    cols = np.arange(max(c0 - radius, 0), min(c0 + radius, w - 1) + 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    dr = rr - r0
    dc = cc - c0
    inside = dr * dr + dc * dc <= radius * radius
    dr = dr[inside]
    dc = dc[inside]
    tgt_r = rr[inside]
    tgt_c = cc[inside]
    n = np.maximum(np.abs(dr), np.abs(dc))
    blocked = np.zeros(dr.shape, dtype=bool)
    nmax = int(n.max()) if n.size else 0
    blk = blocking.astype(bool)
    for i in range(1, nmax):
        live = i < n
        if not live.any():
            break
        nn = n[live]
        sr = r0 + (2 * dr[live] * i + nn) // (2 * nn)
        sc = c0 + (2 * dc[live] * i + nn) // (2 * nn)
        hit = blk[sr, sc]
        idx = np.where(live)[0]
        blocked[idx[hit]] = True
    out[tgt_r[~blocked], tgt_c[~blocked]] = 1
    return out


def visibility_mask(blocking, r0, c0, radius):
    """Unoccluded-cell mask within ``radius`` cells of (r0, c0).

    ``blocking`` is a (H, W) uint8/bool occlusion grid.  The source cell is
    always visible; blocking cells themselves are visible (a wall can be
    seen, not seen through).
    """
    blocking = np.ascontiguousarray(blocking, dtype=np.uint8)
    if NUMBA_ENABLED:
        return _visibility_loop(blocking, int(r0), int(c0), int(radius))
    return _visibility_numpy(blocking, int(r0), int(c0), int(radius))


# ---------------------------------------------------------------------------
# Lethal-cell crossings along raster lines (escape-goal scoring)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _line_crossings_loop(mask, r0, c0, r1, c1):
    dr = r1 - r0
    dc = c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        return int(mask[r0, c0])
    count = 0
    for i in range(0, n):
        rr = r0 + (2 * dr * i + n) // (2 * n)
        cc = c0 + (2 * dc * i + n) // (2 * n)
        if mask[rr, cc]:
            count += 1
    return count


def _line_crossings_numpy(mask, r0, c0, r1, c1):
    dr = r1 - r0
    dc = c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        return int(mask[r0, c0])
    i = np.arange(0, n)
    rr = r0 + (2 * dr * i + n) // (2 * n)
    cc = c0 + (2 * dc * i + n) // (2 * n)
    return int(mask[rr, cc].sum())


def line_crossings(mask, r0, c0, r1, c1):
    """Count True cells on the raster line from (r0,c0) to (r1,c1).

    The start cell is included, the end cell is not; for scoring escape
    goals the end cell is non-lethal by construction.
    """
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if NUMBA_ENABLED:
        return _line_crossings_loop(mask, int(r0), int(c0), int(r1), int(c1))
    return _line_crossings_numpy(mask, int(r0), int(c0), int(r1), int(c1))


@njit(cache=True)
def _crossing_field_loop(mask, r0, c0):
    h, w = mask.shape
    out = np.empty((h, w), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            out[r, c] = _line_crossings_loop(mask, r0, c0, r, c)
    return out


def _crossing_field_numpy(mask, r0, c0):
    h, w = mask.shape
    out = np.empty((h, w), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            out[r, c] = _line_crossings_numpy(mask, r0, c0, r, c)
    return out


def crossing_field(mask, r0, c0):
    """Per-cell lethal crossings from (r0, c0) to every cell."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if NUMBA_ENABLED:
        return _crossing_field_loop(mask, int(r0), int(c0))
    return _crossing_field_numpy(mask, int(r0), int(c0))


# ---------------------------------------------------------------------------
# Least-squares plane-fit surface normals over a disk neighborhood
# ---------------------------------------------------------------------------


@njit(cache=True)
def _plane_normals_loop(elev, radius_cells, res, min_pts):
    h, w = elev.shape
    nx = np.full((h, w), np.nan)
    ny = np.full((h, w), np.nan)
    nz = np.full((h, w), np.nan)
    rad2 = radius_cells * radius_cells
    for r in range(h):
        for c in range(w):
            n_pts = 0
            sx = sy = sz = sxx = syy = sxy = sxz = syz = 0.0
            for dr in range(-radius_cells, radius_cells + 1):
                rr = r + dr
                if rr < 0 or rr >= h:
                    continue
                for dc in range(-radius_cells, radius_cells + 1):
                    cc = c + dc
                    if cc < 0 or cc >= w:
                        continue
                    if dr * dr + dc * dc > rad2:
                        continue
                    z = elev[rr, cc]
                    if np.isnan(z):
                        continue
                    x = dc * res
                    y = dr * res
                    n_pts += 1
                    sx += x
                    sy += y
                    sz += z
                    sxx += x * x
                    syy += y * y
                    sxy += x * y
                    sxz += x * z
                    syz += y * z
            if n_pts < min_pts:
                continue
            cxx = sxx - sx * sx / n_pts
            cyy = syy - sy * sy / n_pts
            cxy = sxy - sx * sy / n_pts
            cxz = sxz - sx * sz / n_pts
            cyz = syz - sy * sz / n_pts
            det = cxx * cyy - cxy * cxy
            if det < 1e-12:
                continue
            a = (cyy * cxz - cxy * cyz) / det
            b = (cxx * cyz - cxy * cxz) / det
            inv_len = 1.0 / np.sqrt(a * a + b * b + 1.0)
            nx[r, c] = -a * inv_len
            ny[r, c] = -b * inv_len
            nz[r, c] = inv_len
    return nx, ny, nz


def _plane_normals_numpy(elev, radius_cells, res, min_pts):
    from scipy import ndimage

    offs = np.arange(-radius_cells, radius_cells + 1)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    disk = (dy * dy + dx * dx) <= radius_cells * radius_cells
    kx = np.where(disk, dx * res, 0.0)
    ky = np.where(disk, dy * res, 0.0)
    k1 = disk.astype(float)

    known = np.isfinite(elev)
    z = np.where(known, elev, 0.0)
    kf = known.astype(float)

    def corr(img, ker):
        return ndimage.correlate(img, ker, mode="constant", cval=0.0)

    n = corr(kf, k1)
    sx = corr(kf, kx)
    sy = corr(kf, ky)
    sz = corr(z, k1)
    sxx = corr(kf, kx * kx)
    syy = corr(kf, ky * ky)
    sxy = corr(kf, kx * ky)
    sxz = corr(z, kx)
    syz = corr(z, ky)

    with np.errstate(invalid="ignore", divide="ignore"):
        cxx = sxx - sx * sx / n
        cyy = syy - sy * sy / n
        cxy = sxy - sx * sy / n
        cxz = sxz - sx * sz / n
        cyz = syz - sy * sz / n
        det = cxx * cyy - cxy * cxy
        valid = (n >= min_pts) & (det >= 1e-12)
        a = np.where(valid, (cyy * cxz - cxy * cyz) / np.where(valid, det, 1.0), np.nan)
        b = np.where(valid, (cxx * cyz - cxy * cxz) / np.where(valid, det, 1.0), np.nan)
        inv_len = 1.0 / np.sqrt(a * a + b * b + 1.0)
    nx = np.where(valid, -a * inv_len, np.nan)
    ny = np.where(valid, -b * inv_len, np.nan)
    nz = np.where(valid, inv_len, np.nan)
    return nx, ny, nz


def plane_normals(elev, radius_cells, res, min_pts=3):
    """Per-cell unit surface normals from an LSQ plane fit on ``elev``.

    NaN elevation cells are skipped; cells with fewer than ``min_pts``
    known neighbors in the disk (or a degenerate fit) get NaN normals.
    """
    elev = np.ascontiguousarray(elev, dtype=float)
    if NUMBA_ENABLED:
        return _plane_normals_loop(elev, int(radius_cells), float(res), int(min_pts))
    return _plane_normals_numpy(elev, int(radius_cells), float(res), int(min_pts))


# ---------------------------------------------------------------------------
# Max adjacent elevation gap (step hazard)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _max_gap_loop(elev):
    h, w = elev.shape
    out = np.full((h, w), np.nan)
    for r in range(h):
        for c in range(w):
            z = elev[r, c]
            if np.isnan(z):
                continue
            best = -1.0
            for dr in range(-1, 2):
                for dc in range(-1, 2):
                    if dr == 0 and dc == 0:
                        continue
                    rr = r + dr
                    cc = c + dc
                    if rr < 0 or rr >= h or cc < 0 or cc >= w:
                        continue
                    zn = elev[rr, cc]
                    if np.isnan(zn):
                        continue
                    gap = abs(z - zn)
                    if gap > best:
                        best = gap
            if best >= 0.0:
                out[r, c] = best
    return out


def _max_gap_numpy(elev):
    h, w = elev.shape
    best = np.full((h, w), -1.0)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.full((h, w), np.nan)
            rs = slice(max(dr, 0), h + min(dr, 0))
            cs = slice(max(dc, 0), w + min(dc, 0))
            rd = slice(max(-dr, 0), h + min(-dr, 0))
            cd = slice(max(-dc, 0), w + min(-dc, 0))
            shifted[rd, cd] = elev[rs, cs]
            gap = np.abs(elev - shifted)
            upd = np.isfinite(gap) & (gap > best)
            best[upd] = gap[upd]
    out = np.where(np.isfinite(elev) & (best >= 0.0), best, np.nan)
    return out


def max_adjacent_gap(elev):
    """Per-cell max |elevation difference| over the 8-neighborhood.

    NaN where the cell itself or all its neighbors are unknown.
    """
    elev = np.ascontiguousarray(elev, dtype=float)
    if NUMBA_ENABLED:
        return _max_gap_loop(elev)
    return _max_gap_numpy(elev)


# ---------------------------------------------------------------------------
# A* search over the 8-connected grid (lexicographic (f, h, index) heap)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _heap_less(fa, ha, ia, fb, hb, ib):
    if fa != fb:
        return fa < fb
    if ha != hb:
        return ha < hb
    return ia < ib


@njit(cache=True)
def _heap_push(hf, hh, hi, size, f, h, i):
    j = size
    hf[j] = f
    hh[j] = h
    hi[j] = i
    while j > 0:
        p = (j - 1) >> 1
        if _heap_less(hf[j], hh[j], hi[j], hf[p], hh[p], hi[p]):
            hf[j], hf[p] = hf[p], hf[j]
            hh[j], hh[p] = hh[p], hh[j]
            hi[j], hi[p] = hi[p], hi[j]
            j = p
        else:
            break
    return size + 1


@njit(cache=True)
def _heap_pop(hf, hh, hi, size):
    f, h, i = hf[0], hh[0], hi[0]
    size -= 1
    hf[0], hh[0], hi[0] = hf[size], hh[size], hi[size]
    j = 0
    while True:
        l = 2 * j + 1
        r = l + 1
        small = j
        if l < size and _heap_less(hf[l], hh[l], hi[l], hf[small], hh[small], hi[small]):
            small = l
        if r < size and _heap_less(hf[r], hh[r], hi[r], hf[small], hh[small], hi[small]):
            small = r
        if small == j:
            break
        hf[j], hf[small] = hf[small], hf[j]
        hh[j], hh[small] = hh[small], hh[j]
        hi[j], hi[small] = hi[small], hi[j]
        j = small
    return f, h, i, size


_H_NONE = 0
_H_OCTILE = 1
_H_EUCLID_SQ = 2


@njit(cache=True, inline="always")
def _astar_heuristic(r, c, gr, gc, lam, res, squared, mode, cvar_floor):
    if mode == _H_NONE:
        return 0.0
    dr = abs(r - gr)
    dc = abs(c - gc)
    if mode == _H_EUCLID_SQ:
        d2 = (dr * dr + dc * dc) * res * res
        if squared:
            return lam * d2
        return lam * np.sqrt(d2)
    diag = dr if dr < dc else dc
    cheb = dr if dr > dc else dc
    straight = cheb - diag
    risk = cheb * cvar_floor
    if squared:
        return lam * res * res * (2.0 * diag + straight) + risk
    return lam * res * (np.sqrt(2.0) * diag + straight) + risk


@njit(cache=True)
def _astar_loop(cvar, lethal, sr, sc, gr, gc, lam, res, squared, hmode, cvar_floor, mu0):
    h, w = cvar.shape
    n = h * w
    g_cost = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    closed = np.zeros(n, dtype=np.uint8)
    cap = 8 * n + 8
    hf = np.empty(cap)
    hh = np.empty(cap)
    hi = np.empty(cap, dtype=np.int64)
    size = 0
    start = sr * w + sc
    goal = gr * w + gc
    g_cost[start] = mu0
    h0 = _astar_heuristic(sr, sc, gr, gc, lam, res, squared, hmode, cvar_floor)
    size = _heap_push(hf, hh, hi, size, mu0 + h0, h0, start)
    offs_r = np.array([-1, -1, -1, 0, 0, 1, 1, 1], dtype=np.int64)
    offs_c = np.array([-1, 0, 1, -1, 1, -1, 0, 1], dtype=np.int64)
    sq2 = np.sqrt(2.0)
    step_cost = np.empty(8)
    for t in range(8):
        d = sq2 if (offs_r[t] != 0 and offs_c[t] != 0) else 1.0
        step_cost[t] = lam * (d * res) * (d * res) if squared else lam * d * res
    while size > 0:
        f, hv, idx, size = _heap_pop(hf, hh, hi, size)
        if closed[idx]:
            continue
        closed[idx] = 1
        if idx == goal:
            break
        r = idx // w
        c = idx % w
        base = g_cost[idx]
        for t in range(8):
            rr = r + offs_r[t]
            cc = c + offs_c[t]
            if rr < 0 or rr >= h or cc < 0 or cc >= w:
                continue
            j = rr * w + cc
            if closed[j] or lethal[rr, cc] > 0.5:
                continue
            v = cvar[rr, cc]
            if not np.isfinite(v):
                continue
            cand = base + v + step_cost[t]
            if cand < g_cost[j]:
                g_cost[j] = cand
                parent[j] = idx
                hnew = _astar_heuristic(rr, cc, gr, gc, lam, res, squared, hmode, cvar_floor)
                size = _heap_push(hf, hh, hi, size, cand + hnew, hnew, j)
    return g_cost, parent, closed[goal] == 1


# ---------------------------------------------------------------------------
# Dynamics rollout and trajectory cost evaluation
#
# Model codes: 0 = 6-state omnidirectional [px,py,th,vx,vy,vth] with
# controls [ax,ay,ath]; 1 = 4-state differential drive [px,py,th,vx] with
# controls [ax, vth_cmd].
# ---------------------------------------------------------------------------

MODEL_OMNI6 = 0
MODEL_DIFF4 = 1


@njit(cache=True)
def _rollout_loop(model, x0, controls, dt, kappa):
    steps = controls.shape[0]
    nx = x0.shape[0]
    out = np.empty((steps + 1, nx))
    out[0] = x0
    for k in range(steps):
        x = out[k]
        u = controls[k]
        th = x[2]
        if model == MODEL_OMNI6:
            out[k + 1, 0] = x[0] + dt * (x[3] * np.cos(th) - x[4] * np.sin(th))
            out[k + 1, 1] = x[1] + dt * (x[3] * np.sin(th) + x[4] * np.cos(th))
            out[k + 1, 2] = x[2] + dt * (kappa * x[3] + (1.0 - kappa) * x[5])
            out[k + 1, 3] = x[3] + dt * u[0]
            out[k + 1, 4] = x[4] + dt * u[1]
            out[k + 1, 5] = x[5] + dt * u[2]
        else:
            out[k + 1, 0] = x[0] + dt * (x[3] * np.cos(th))
            out[k + 1, 1] = x[1] + dt * (x[3] * np.sin(th))
            out[k + 1, 2] = x[2] + dt * (kappa * x[3] + (1.0 - kappa) * u[1])
            out[k + 1, 3] = x[3] + dt * u[0]
    return out


def rollout(model, x0, controls, dt, kappa):
    """Integrate the discrete dynamics for a control sequence.

    Returns a (T+1, n_x) state array starting at ``x0``.
    """
    x0 = np.ascontiguousarray(x0, dtype=float)
    controls = np.ascontiguousarray(controls, dtype=float)
    return _rollout_loop(int(model), x0, controls, float(dt), float(kappa))


@njit(cache=True, inline="always")
def _bilinear_at(layer, ox, oy, res, x, y):
    h, w = layer.shape
    u = (x - ox) / res - 0.5
    v = (y - oy) / res - 0.5
    if u < 0.0:
        u = 0.0
    if u > w - 1.0:
        u = w - 1.0
    if v < 0.0:
        v = 0.0
    if v > h - 1.0:
        v = h - 1.0
    c0 = int(np.floor(u))
    r0 = int(np.floor(v))
    if c0 > w - 2:
        c0 = w - 2
    if r0 > h - 2:
        r0 = h - 2
    if c0 < 0:
        c0 = 0
    if r0 < 0:
        r0 = 0
    tx = u - c0
    ty = v - r0
    z00 = layer[r0, c0]
    z01 = layer[r0, c0 + 1]
    z10 = layer[r0 + 1, c0]
    z11 = layer[r0 + 1, c0 + 1]
    return (1.0 - ty) * ((1.0 - tx) * z00 + tx * z01) + ty * ((1.0 - tx) * z10 + tx * z11)


def _bilinear_numpy(layer, ox, oy, res, x, y):
    h, w = layer.shape
    u = np.clip((np.asarray(x, dtype=float) - ox) / res - 0.5, 0.0, w - 1.0)
    v = np.clip((np.asarray(y, dtype=float) - oy) / res - 0.5, 0.0, h - 1.0)
    c0 = np.clip(np.floor(u).astype(int), 0, w - 2)
    r0 = np.clip(np.floor(v).astype(int), 0, h - 2)
    tx = u - c0
    ty = v - r0
    z00 = layer[r0, c0]
    z01 = layer[r0, c0 + 1]
    z10 = layer[r0 + 1, c0]
    z11 = layer[r0 + 1, c0 + 1]
    return (1.0 - ty) * ((1.0 - tx) * z00 + tx * z01) + ty * ((1.0 - tx) * z10 + tx * z11)


def bilinear_sample(layer, origin, res, x, y):
    """Bilinear interpolation between cell centers, clamped at map edges."""
    layer = np.ascontiguousarray(layer, dtype=float)
    if np.isscalar(x) and NUMBA_ENABLED:
        return float(_bilinear_at(layer, origin[0], origin[1], res, float(x), float(y)))
    out = _bilinear_numpy(layer, origin[0], origin[1], res, x, y)
    return float(out) if np.isscalar(x) else out


_OOB_COST = 1.0e3


@njit(cache=True)
def _eval_traj_loop(states, ref, qdiag, w_risk, cvar, lethal, ox, oy, res):
    steps = states.shape[0]
    nx = states.shape[1]
    h, w = cvar.shape
    step_cvar = np.empty(steps)
    cost = 0.0
    violations = 0
    for k in range(steps):
        for i in range(nx):
            d = states[k, i] - ref[k, i]
            if i == 2:
                d = np.arctan2(np.sin(d), np.cos(d))
            cost += qdiag[i] * d * d
        x = states[k, 0]
        y = states[k, 1]
        col = int(np.floor((x - ox) / res))
        row = int(np.floor((y - oy) / res))
        if row < 0 or row >= h or col < 0 or col >= w:
            step_cvar[k] = _OOB_COST
            violations += 1
        else:
            step_cvar[k] = _bilinear_at(cvar, ox, oy, res, x, y)
            if lethal[row, col] > 0.5:
                violations += 1
        cost += w_risk * step_cvar[k]
    return cost, violations, step_cvar


def _eval_traj_numpy(states, ref, qdiag, w_risk, cvar, lethal, ox, oy, res):
    h, w = cvar.shape
    d = states - ref
    d[:, 2] = np.arctan2(np.sin(d[:, 2]), np.cos(d[:, 2]))
    cost = float(np.sum(d * d @ qdiag))
    x = states[:, 0]
    y = states[:, 1]
    col = np.floor((x - ox) / res).astype(int)
    row = np.floor((y - oy) / res).astype(int)
    oob = (row < 0) | (row >= h) | (col < 0) | (col >= w)
    step_cvar = np.where(oob, _OOB_COST, _bilinear_numpy(cvar, ox, oy, res, x, y))
    inb = ~oob
    hit = np.zeros(states.shape[0], dtype=bool)
    hit[inb] = lethal[row[inb], col[inb]] > 0.5
    violations = int(oob.sum() + hit.sum())
    cost += w_risk * float(step_cvar.sum())
    return cost, violations, step_cvar


def eval_trajectory(states, ref, qdiag, w_risk, cvar, lethal, origin, res):
    """Tracking + risk cost of a state sequence against a reference.

    Returns (cost, lethal-violation count, per-step interpolated CVaR).
    Heading error (index 2) is wrapped; positions outside the map count
    as violations and are charged a large fixed CVaR.
    """
    states = np.ascontiguousarray(states, dtype=float)
    ref = np.ascontiguousarray(ref, dtype=float)
    qdiag = np.ascontiguousarray(qdiag, dtype=float)
    cvar = np.ascontiguousarray(cvar, dtype=float)
    lethal = np.ascontiguousarray(lethal, dtype=float)
    if NUMBA_ENABLED:
        return _eval_traj_loop(
            states, ref, qdiag, float(w_risk), cvar, lethal, origin[0], origin[1], float(res)
        )
    return _eval_traj_numpy(
        states.copy(), ref, qdiag, float(w_risk), cvar, lethal, origin[0], origin[1], float(res)
    )


# ---------------------------------------------------------------------------
# ADMM iteration loop for box-constrained QPs (used by riskplan.qp)
#
# Operates on the Ruiz-scaled problem; termination checks use unscaled
# residuals via the D/E/c scaling vectors.  Status codes mirror
# riskplan.qp: 1 solved, -2 max_iter, -3 primal infeasible, -4 dual
# infeasible.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _cho_solve_vec(L, Lt, b):
    n = L.shape[0]
    for i in range(n):
        b[i] = (b[i] - np.dot(L[i, :i], b[:i])) / L[i, i]
    for i in range(n - 1, -1, -1):
        b[i] = (b[i] - np.dot(Lt[i, i + 1 :], b[i + 1 :])) / L[i, i]


@njit(cache=True)
def _admm_loop(
    P, q, A, lb, ub, L, rho, sigma, relax,
    x, z, y, dvec, evec, cscale,
    eps_abs, eps_rel, eps_inf, max_iter, check_every,
):
    m = z.shape[0]
    At = np.ascontiguousarray(A.T)
    Lt = np.ascontiguousarray(L.T)
    x_chk = x.copy()
    y_chk = y.copy()
    status = -2
    iters = 0
    rprim = np.inf
    rdual = np.inf
    dc = dvec * cscale
    for it in range(1, max_iter + 1):
        iters = it
        # x-update: (P + sigma I + A' rho A) xt = sigma x - q + A'(rho z - y)
        xt = sigma * x - q + np.dot(At, rho * z - y)
        _cho_solve_vec(L, Lt, xt)
        zt = np.dot(A, xt)
        x = relax * xt + (1.0 - relax) * x
        zr = relax * zt + (1.0 - relax) * z
        znew = np.minimum(np.maximum(zr + y / rho, lb), ub)
        y = y + rho * (zr - znew)
        z = znew
        if it % check_every == 0 or it == max_iter:
            ax = np.dot(A, x)
            ax_un = np.abs(ax) / evec
            z_un = np.abs(z) / evec
            rprim = np.max(np.abs(ax - z) / evec) if m else 0.0
            px = np.dot(P, x)
            aty = np.dot(At, y)
            rdual = np.max(np.abs(px + q + aty) / dc)
            eps_p = eps_abs + eps_rel * max(np.max(ax_un), np.max(z_un))
            eps_d = eps_abs + eps_rel * max(
                np.max(np.abs(px) / dc),
                max(np.max(np.abs(aty) / dc), np.max(np.abs(q) / dc)),
            )
            if rprim <= eps_p and rdual <= eps_d:
                status = 1
                break
            # primal infeasibility certificate from dy (unscaled via E/c)
            dy = y - y_chk
            dy_un = dy * evec / cscale
            dy_n = np.max(np.abs(dy_un)) if m else 0.0
            if dy_n > 1e-12:
                aty_d = np.max(np.abs(np.dot(At, dy)) / dc)
                ok = aty_d <= eps_inf * dy_n
                support = 0.0
                if ok:
                    for j in range(m):
                        if dy_un[j] > eps_inf * dy_n:
                            if np.isinf(ub[j]):
                                ok = False
                                break
                            support += ub[j] * dy[j] / cscale
                        elif dy_un[j] < -eps_inf * dy_n:
                            if np.isinf(lb[j]):
                                ok = False
                                break
                            support += lb[j] * dy[j] / cscale
                if ok and support < -eps_inf * dy_n:
                    y = dy_un
                    status = -3
                    break
            # dual infeasibility certificate from dx (unscaled via D)
            dx = x - x_chk
            dx_n = np.max(np.abs(dx * dvec))
            if dx_n > 1e-12:
                ok = np.max(np.abs(np.dot(P, dx)) / dc) <= eps_inf * dx_n
                if ok:
                    qdx = np.dot(q, dx) / cscale
                    if qdx >= -eps_inf * dx_n:
                        ok = False
                if ok:
                    adx = np.dot(A, dx) / evec
                    for j in range(m):
                        if np.isinf(ub[j]) and np.isinf(lb[j]):
                            continue
                        if np.isinf(ub[j]):
                            if adx[j] < -eps_inf * dx_n:
                                ok = False
                                break
                        elif np.isinf(lb[j]):
                            if adx[j] > eps_inf * dx_n:
                                ok = False
                                break
                        elif abs(adx[j]) > eps_inf * dx_n:
                            ok = False
                            break
                if ok:
                    x = dx * dvec
                    status = -4
                    break
            x_chk = x.copy()
            y_chk = y.copy()
    return status, iters, rprim, rdual, x, z, y


def _admm_numpy(
    P, q, A, lb, ub, L, rho, sigma, relax,
    x, z, y, dvec, evec, cscale,
    eps_abs, eps_rel, eps_inf, max_iter, check_every,
):
    from scipy.linalg import cho_solve

    x_chk = x.copy()
    y_chk = y.copy()
    status = -2
    iters = 0
    rprim = np.inf
    rdual = np.inf
    At = A.T
    for it in range(1, max_iter + 1):
        iters = it
        rhs = sigma * x - q + At @ (rho * z - y)
        xt = cho_solve((L, True), rhs)
        zt = A @ xt
        x = relax * xt + (1.0 - relax) * x
        zr = relax * zt + (1.0 - relax) * z
        znew = np.clip(zr + y / rho, lb, ub)
        y = y + rho * (zr - znew)
        z = znew
        if it % check_every == 0 or it == max_iter:
            ax = A @ x
            rp = np.abs(ax - z) / evec
            rprim = float(rp.max()) if rp.size else 0.0
            px = P @ x
            aty = At @ y
            rd = np.abs(px + q + aty) / (dvec * cscale)
            rdual = float(rd.max()) if rd.size else 0.0
            eps_p = eps_abs + eps_rel * max(
                float(np.max(np.abs(ax) / evec)) if ax.size else 0.0,
                float(np.max(np.abs(z) / evec)) if z.size else 0.0,
            )
            eps_d = eps_abs + eps_rel * max(
                float(np.max(np.abs(px) / (dvec * cscale))),
                float(np.max(np.abs(aty) / (dvec * cscale))),
                float(np.max(np.abs(q) / (dvec * cscale))),
            )
            if rprim <= eps_p and rdual <= eps_d:
                status = 1
                break
            dy = y - y_chk
            dy_un = dy * evec / cscale
            dy_n = float(np.max(np.abs(dy_un))) if dy.size else 0.0
            if dy_n > 1e-12:
                aty_d = float(np.max(np.abs(At @ dy) / (dvec * cscale)))
                if aty_d <= eps_inf * dy_n:
                    pos = dy_un > eps_inf * dy_n
                    neg = dy_un < -eps_inf * dy_n
                    if not (np.isinf(ub[pos]).any() or np.isinf(lb[neg]).any()):
                        support = float(ub[pos] @ dy[pos] + lb[neg] @ dy[neg]) / cscale
                        if support < -eps_inf * dy_n:
                            y = dy_un
                            status = -3
                            break
            dx = x - x_chk
            dx_n = float(np.max(np.abs(dx * dvec))) if dx.size else 0.0
            if dx_n > 1e-12:
                pdx = float(np.max(np.abs(P @ dx) / (dvec * cscale)))
                qdx = float(q @ dx) / cscale
                ok = pdx <= eps_inf * dx_n and qdx < -eps_inf * dx_n
                if ok:
                    adx = (A @ dx) / evec
                    up_ok = np.where(np.isinf(ub), adx >= -eps_inf * dx_n, True)
                    lo_ok = np.where(np.isinf(lb), adx <= eps_inf * dx_n, True)
                    both = ~(np.isinf(ub) | np.isinf(lb))
                    tight = np.where(both, np.abs(adx) <= eps_inf * dx_n, True)
                    free = np.isinf(ub) & np.isinf(lb)
                    if np.all((up_ok & lo_ok & tight) | free):
                        x[:] = dx * dvec
                        status = -4
                        break
            x_chk = x.copy()
            y_chk = y.copy()
    return status, iters, rprim, rdual, x, z, y


def admm_iterate(P, q, A, lb, ub, L, rho, sigma, relax, x, z, y,
                 dvec, evec, cscale, eps_abs, eps_rel, eps_inf,
                 max_iter, check_every):
    """Run the ADMM loop on a scaled QP; mutates/returns x, z, y.

    Returns (status, iterations, primal residual, dual residual, x, z, y)
    with residuals measured on the unscaled problem.
    """
    if NUMBA_ENABLED:
        return _admm_loop(
            P, q, A, lb, ub, L, rho, sigma, relax, x.copy(), z.copy(), y.copy(),
            dvec, evec, cscale, eps_abs, eps_rel, eps_inf,
            max_iter, check_every,
        )
    return _admm_numpy(
        P, q, A, lb, ub, L, rho, sigma, relax, x.copy(), z.copy(), y.copy(),
        dvec, evec, cscale, eps_abs, eps_rel, eps_inf,
        max_iter, check_every,
    )
