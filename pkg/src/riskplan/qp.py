"""Embedded convex QP solver.

Solves  minimize 0.5 x'Px + q'x  subject to  l <= Ax <= u  with a fixed
step operator-splitting (ADMM) iteration: one Cholesky factorization of
P + sigma*I + A' diag(rho) A per problem, Ruiz diagonal equilibration,
and divergence certificates for infeasibility detection.  Equality rows
(l == u) get a stiffer penalty.  No polishing pass.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

STATUS_SOLVED = "solved"
STATUS_MAX_ITER = "max_iter"
STATUS_PRIMAL_INFEASIBLE = "primal_infeasible"
STATUS_DUAL_INFEASIBLE = "dual_infeasible"

_STATUS_FROM_CODE = {1: STATUS_SOLVED, -2: STATUS_MAX_ITER, -3: STATUS_PRIMAL_INFEASIBLE, -4: STATUS_DUAL_INFEASIBLE}

_RHO = 1.0
_RHO_EQ_SCALE = 1e3
_SIGMA = 1e-6
_RELAX = 1.6
_RUIZ_ITERS = 5
_EPS_INF = 1e-5
_MIN_SCALING = 1e-4
_MAX_SCALING = 1e4


@dataclass
class QpProblem:
    """Dense QP data: 0.5 x'Px + q'x subject to l <= Ax <= u."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.A = np.asarray(self.A, dtype=float).reshape(-1, self.q.size)
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        n = self.q.size
        m = self.A.shape[0]
        if self.P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {self.P.shape}")
        if self.l.size != m or self.u.size != m:
            raise ValueError("l/u length must match A row count")
        if not np.allclose(self.P, self.P.T, atol=1e-10, rtol=0):
            raise ValueError("P must be symmetric")
        if np.any(self.l > self.u):
            raise ValueError("l > u on some rows")
        if not (np.all(np.isfinite(self.P)) and np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.A))):
            raise ValueError("P, q, A must be finite")

    @property
    def num_vars(self):
        return self.q.size

    @property
    def num_constraints(self):
        return self.A.shape[0]


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float = np.nan
    certificate: np.ndarray | None = field(default=None, repr=False)

    @property
    def solved(self):
        return self.status == STATUS_SOLVED


def _ruiz_equilibrate(P, q, A, iters=_RUIZ_ITERS):
    """Diagonal scaling of the KKT matrix [[P, A'], [A, 0]] plus cost scaling.

    Returns scaled (P, q, A) and the scaling vectors (d, e, c) such that
    P_s = c * D P D, q_s = c * D q, A_s = E A D.
    """
    n = q.size
    m = A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    for _ in range(iters):
        col_p = np.max(np.abs(Ps), axis=0) if n else np.zeros(0)
        col_a = np.max(np.abs(As), axis=0) if m else np.zeros(n)
        norm_x = np.sqrt(np.clip(np.maximum(col_p, col_a), _MIN_SCALING, _MAX_SCALING))
        row_a = np.max(np.abs(As), axis=1) if m else np.zeros(0)
        norm_y = np.sqrt(np.clip(row_a, _MIN_SCALING, _MAX_SCALING))
        dd = 1.0 / norm_x
        ee = 1.0 / norm_y if m else np.zeros(0)
        Ps = Ps * dd[:, None] * dd[None, :]
        qs = qs * dd
        if m:
            As = As * ee[:, None] * dd[None, :]
        d *= dd
        e *= ee if m else 1.0
        # cost normalization
        p_rows = np.mean(np.max(np.abs(Ps), axis=0)) if n else 0.0
        g = np.clip(max(p_rows, np.max(np.abs(qs)) if qs.size else 0.0), _MIN_SCALING, _MAX_SCALING)
        gamma = 1.0 / g
        Ps *= gamma
        qs *= gamma
        c *= gamma
    return Ps, qs, As, d, e, c


def solve_qp(problem, tol_abs=1e-4, tol_rel=1e-4, max_iter=4000, warm_start=None,
             check_every=25):
    """Solve a :class:`QpProblem` by fixed-penalty ADMM.

    ``warm_start`` is an optional (x, y) pair from a related solve.
    Solved solutions satisfy inf-norm KKT residuals below the tolerances;
    divergence yields a primal/dual infeasibility status with the
    certificate vector stored on the solution.
    """
    n = problem.num_vars
    m = problem.num_constraints
    if m == 0:
        x = np.linalg.lstsq(problem.P + _SIGMA * np.eye(n), -problem.q, rcond=None)[0]
        rd = float(np.max(np.abs(problem.P @ x + problem.q))) if n else 0.0
        obj = 0.5 * x @ problem.P @ x + problem.q @ x
        return QpSolution(x, np.zeros(0), STATUS_SOLVED, 0, 0.0, rd, obj)

    Ps, qs, As, dvec, evec, c = _ruiz_equilibrate(problem.P, problem.q, problem.A)
    ls = problem.l * evec
    us = problem.u * evec

    rho = np.full(m, _RHO)
    eq = np.isfinite(problem.l) & np.isfinite(problem.u) & (problem.u - problem.l < 1e-12)
    rho[eq] *= _RHO_EQ_SCALE

    M = Ps + _SIGMA * np.eye(n) + As.T @ (rho[:, None] * As)
    L = np.linalg.cholesky(M)

    if warm_start is not None:
        x0 = np.asarray(warm_start[0], dtype=float) / dvec
        y0 = np.asarray(warm_start[1], dtype=float) * c / evec
    else:
        x0 = np.zeros(n)
        y0 = np.zeros(m)
    z0 = np.clip(As @ x0, ls, us)

    code, iters, rp, rd, x, z, y = kernels.admm_iterate(
        Ps, qs, As, ls, us, L, rho, _SIGMA, _RELAX,
        x0, z0, y0, dvec, evec, c,
        float(tol_abs), float(tol_rel), _EPS_INF, int(max_iter), int(check_every),
    )
    status = _STATUS_FROM_CODE[code]
    if status == STATUS_PRIMAL_INFEASIBLE:
        return QpSolution(np.full(n, np.nan), np.full(m, np.nan), status, iters,
                          np.inf, np.inf, np.nan, certificate=y.copy())
    if status == STATUS_DUAL_INFEASIBLE:
        return QpSolution(np.full(n, np.nan), np.full(m, np.nan), status, iters,
                          np.inf, np.inf, np.nan, certificate=x.copy())
    x_out = x * dvec
    y_out = y * evec / c
    obj = 0.5 * x_out @ problem.P @ x_out + problem.q @ x_out
    return QpSolution(x_out, y_out, status, iters, rp, rd, obj)


def kkt_residuals(problem, x, y):
    """Unscaled KKT residuals (stationarity, primal feasibility) of (x, y)."""
    r_dual = problem.P @ x + problem.q + problem.A.T @ y
    ax = problem.A @ x
    r_prim = ax - np.clip(ax, problem.l, problem.u)
    return (float(np.max(np.abs(r_dual))) if x.size else 0.0,
            float(np.max(np.abs(r_prim))) if ax.size else 0.0)


# ---------------------------------------------------------------------------
# Debug file round-trip: JSON header + dense P lower triangle + A triplets
# ---------------------------------------------------------------------------


def save_problem(problem, path):
    """Write a QP to a JSON debug file (round-trips float64 exactly)."""
    import json

    n = problem.num_vars
    tri = [[i, j, problem.P[i, j]] for i in range(n) for j in range(i + 1) if problem.P[i, j] != 0.0]
    rows, cols = np.nonzero(problem.A)
    payload = {
        "format": "riskplan-qp",
        "num_vars": n,
        "num_constraints": problem.num_constraints,
        "P_lower": tri,
        "q": problem.q.tolist(),
        "A_triplets": [[int(i), int(j), float(problem.A[i, j])] for i, j in zip(rows, cols)],
        "l": [None if v == -np.inf else v for v in problem.l],
        "u": [None if v == np.inf else v for v in problem.u],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_problem(path):
    """Read a QP debug file written by :func:`save_problem`."""
    import json

    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "riskplan-qp":
        raise ValueError(f"{path} is not a QP debug file")
    n = payload["num_vars"]
    m = payload["num_constraints"]
    P = np.zeros((n, n))
    for i, j, v in payload["P_lower"]:
        P[i, j] = v
        P[j, i] = v
    A = np.zeros((m, n))
    for i, j, v in payload["A_triplets"]:
        A[i, j] = v
    l = np.array([-np.inf if v is None else v for v in payload["l"]], dtype=float)
    u = np.array([np.inf if v is None else v for v in payload["u"]], dtype=float)
    return QpProblem(P, np.array(payload["q"], dtype=float), A, l, u)
