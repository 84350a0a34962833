"""Risk-constrained kinodynamic MPC via SQP over the embedded QP solver.

Each planning call: shift the previous control sequence, then iterate
{candidate selection from the trajectory library, linearize costs and
constraints into a QP, solve, linesearch on the control correction,
re-rollout}.  Falls back to the best collision-free library member, then
to an emergency stopping sequence.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .collision import decompose_obstacles, footprint_polygon, signed_distance_witness
from .dynamics import CONTROL_DIM, STATE_DIM, linearize_dynamics, rollout, wrap_angle
from .orientation import NormalField, UnknownNormalError
from .qp import QpProblem, solve_qp
from .trajlib import (
    Trajectory,
    choose_candidate,
    generate_trajectory_library,
    static_library_members,
    stopping_controls,
)

STATUS_REFINED = "refined"
STATUS_LIBRARY = "library"
STATUS_EMERGENCY = "emergency"


@dataclass
class MpcConfig:
    """Kinodynamic planner parameters (all durations in seconds, SI units)."""

    model: str = "omni6"
    horizon: int = 20
    dt: float = 0.1
    kappa: float = 0.5
    a_max: tuple = None           # per-control limits; model default if None
    v_max: tuple = None           # [vx, vy, vth] (omni6) or [vx] (diff4)
    gamma_v: float = 5.0          # speed bound = gamma_v * cvar
    gamma_theta: float = 5.0
    rho_speed_floor: float = 0.2  # keeps the speed bound usable on benign cells
    rho_max: float = 0.5          # obstacle threshold on the CVaR layer
    q_position: float = 1.0
    q_heading: float = 1.0
    q_velocity: float = 0.1
    w_risk: float = 1.0
    lambda_slack: float = 200.0
    eps_x: float = 0.5            # trust-region box on state deviations
    eps_u: float = 1.0
    omega_max: tuple = (0.35, 0.35)
    footprint: tuple = (0.99, 0.67)
    sd_activation: float = 3.0    # obstacles beyond this range have no rows
    sd_max_per_step: int = 5      # nearest obstacles constrained per step
    qp_iterations: int = 3
    qp_tol_abs: float = 2e-3
    qp_tol_rel: float = 1e-3
    qp_max_iter: int = 500
    ls_gamma0: float = 1.0
    ls_gamma_min: float = 1.0 / 16.0
    ls_gamma_max: float = 1.0
    ls_max_iteration: int = 8
    v_cruise: float = 1.0
    lookahead: float = 0.8
    arc_rates: tuple = (-1.0, -0.4, 0.4, 1.0)
    n_random: int = 2
    random_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.a_max is None:
            self.a_max = (2.0, 1.5, 2.0) if self.model == "omni6" else (2.0, 1.5)
        if self.v_max is None:
            self.v_max = (1.5, 0.8, 1.5) if self.model == "omni6" else (1.5,)

    @property
    def n_x(self):
        return STATE_DIM[self.model]

    @property
    def n_u(self):
        return CONTROL_DIM[self.model]

    def q_diag(self):
        q = np.full(self.n_x, self.q_velocity)
        q[0] = q[1] = self.q_position
        q[2] = self.q_heading
        return q


@dataclass
class RiskContext:
    """Read-only planning view of a map snapshot."""

    cvar: np.ndarray
    lethal: np.ndarray
    origin: tuple
    resolution: float
    obstacles: list = field(default_factory=list)
    normal_field: NormalField | None = None

    @classmethod
    def from_grid(cls, grid, cfg, center=None, window_m=None, rho_max=None):
        """Build the context, decomposing over-threshold cells to polygons.

        ``rho_max`` overrides the configured obstacle threshold; a raised
        value (escape-lethal relaxation) suspends the factor-lethal mask
        and treats only cells above the relaxed CVaR threshold as
        obstacles.
        """
        cvar = grid["cvar"]
        if rho_max is None:
            rho_max = cfg.rho_max
            lethal = grid["lethal"]
            hazard = np.where(lethal > 0.5, 2.0 * rho_max + 1.0, cvar)
        else:
            # relaxed threshold: confirmed negative obstacles/water stay masked
            hard = np.zeros_like(cvar)
            for name in ("risk_negative_obstacle_lethal", "risk_water_lethal"):
                if name in grid:
                    hard = np.maximum(hard, grid[name])
            lethal = ((cvar > rho_max) | (hard > 0.5)).astype(float)
            hazard = np.where(hard > 0.5, 2.0 * rho_max + 1.0, cvar)
        window = None
        if center is not None and window_m is not None:
            r, c = grid.world_to_cell(center[0], center[1])
            k = int(np.ceil(window_m / grid.resolution))
            window = (int(r) - k, int(r) + k, int(c) - k, int(c) + k)
        obstacles = decompose_obstacles(
            hazard, rho_max, grid.origin, grid.resolution, window=window
        )
        nf = None
        if "elevation" in grid and np.isfinite(grid["elevation"]).any():
            elev = np.where(np.isfinite(grid["elevation"]), grid["elevation"], np.nan)
            nf = NormalField(elev, grid.origin, grid.resolution)
        return cls(cvar=cvar, lethal=lethal, origin=tuple(grid.origin),
                   resolution=grid.resolution, obstacles=obstacles, normal_field=nf)


def _cvar_at(ctx, x, y):
    return kernels.bilinear_sample(ctx.cvar, ctx.origin, ctx.resolution, x, y)


_STENCIL = np.array([
    [0, 0], [1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [1, -1], [-1, 1], [-1, -1],
], dtype=float)


def cvar_derivatives_batch(ctx, xs, ys):
    """Value, gradient and PSD-projected Hessian of the CVaR field.

    Central differences with the cell size as step on the bilinearly
    interpolated layer, batched over query points; Hessians are
    eigenvalue-clamped at zero to keep the QP convex.  Returns arrays of
    shapes (K,), (K, 2), (K, 2, 2).
    """
    h = ctx.resolution
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    px = xs[:, None] + h * _STENCIL[None, :, 0]
    py = ys[:, None] + h * _STENCIL[None, :, 1]
    f = kernels.bilinear_sample(ctx.cvar, ctx.origin, ctx.resolution,
                                px.ravel(), py.ravel()).reshape(px.shape)
    f0 = f[:, 0]
    gx = (f[:, 1] - f[:, 2]) / (2 * h)
    gy = (f[:, 3] - f[:, 4]) / (2 * h)
    hxx = (f[:, 1] - 2 * f0 + f[:, 2]) / h**2
    hyy = (f[:, 3] - 2 * f0 + f[:, 4]) / h**2
    hxy = (f[:, 5] - f[:, 6] - f[:, 7] + f[:, 8]) / (4 * h**2)
    # closed-form symmetric 2x2 eigenvalue clamp
    mean = 0.5 * (hxx + hyy)
    delta = 0.5 * (hxx - hyy)
    root = np.sqrt(delta * delta + hxy * hxy)
    lam1 = np.maximum(mean + root, 0.0)
    lam2 = np.maximum(mean - root, 0.0)
    theta = 0.5 * np.arctan2(2 * hxy, hxx - hyy)
    c, s = np.cos(theta), np.sin(theta)
    H = np.empty((xs.size, 2, 2))
    H[:, 0, 0] = lam1 * c * c + lam2 * s * s
    H[:, 1, 1] = lam1 * s * s + lam2 * c * c
    H[:, 0, 1] = H[:, 1, 0] = (lam1 - lam2) * c * s
    grad = np.column_stack([gx, gy])
    return f0, grad, H


def cvar_derivatives(ctx, x, y):
    """Single-point convenience wrapper around the batched stencil."""
    f0, grad, H = cvar_derivatives_batch(ctx, np.array([x]), np.array([y]))
    return float(f0[0]), grad[0], H[0]


def build_reference(x0, geo_path, cfg):
    """Reference states (T+1, n_x) sampled along the geometric path.

    Points advance at the cruise speed from the nearest path point;
    heading follows the local tangent.  Without a usable path the
    reference holds the current position at zero velocity.
    """
    T = cfg.horizon
    nx = cfg.n_x
    ref = np.zeros((T + 1, nx))
    x0 = np.asarray(x0, dtype=float)
    if geo_path is None or len(geo_path.waypoints) < 2:
        ref[:] = x0
        ref[:, 3:] = 0.0
        return ref
    wp = geo_path.waypoints
    seg = np.diff(wp, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    d = np.hypot(wp[:, 0] - x0[0], wp[:, 1] - x0[1])
    s0 = cum[int(np.argmin(d))]
    s = np.minimum(s0 + cfg.v_cruise * cfg.dt * np.arange(T + 1), cum[-1])
    i = np.minimum(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1)
    t = np.where(seg_len[i] > 0, (s - cum[i]) / np.maximum(seg_len[i], 1e-12), 0.0)
    ref[:, 0:2] = wp[i] + t[:, None] * seg[i]
    ref[:, 2] = np.arctan2(seg[i, 1], seg[i, 0])
    ref[:, 3] = np.where(s < cum[-1], cfg.v_cruise, 0.0)
    return ref


@dataclass
class QpLayout:
    """Variable/row bookkeeping for one built QP."""

    n_x: int
    n_u: int
    horizon: int
    n_slack: int
    row_kinds: list
    u_offset: int
    slack_offset: int

    def extract_du(self, x):
        T = self.horizon
        du = x[self.u_offset : self.u_offset + (T + 1) * self.n_u]
        return du.reshape(T + 1, self.n_u)[:T]

    def rows_of(self, kind):
        return [i for i, k in enumerate(self.row_kinds) if k == kind]


def build_qp(candidate, ref_states, ctx, cfg):
    """Assemble the linearized planning QP around a candidate trajectory.

    Variables are [dx_0..dx_T, du_0..du_T, slacks].  Costs: quadratic
    tracking plus the second-order expansion of the CVaR field (Hessian
    PSD-projected) plus quadratic slack penalties.  Constraints: pinned
    initial state and linearized dynamics as two-sided equality rows,
    control and velocity limits, risk-coupled speed bounds, linearized
    footprint-obstacle signed distances, orientation limits, and
    trust-region boxes on the deviations.

    Returns (QpProblem, QpLayout).
    """
    if not np.all(np.isfinite(candidate.states)) or not np.all(np.isfinite(candidate.controls)):
        raise ValueError("candidate trajectory contains non-finite entries")
    T = cfg.horizon
    nx, nu = cfg.n_x, cfg.n_u
    xs, us = candidate.states, candidate.controls
    if xs.shape != (T + 1, nx) or us.shape != (T, nu):
        raise ValueError("candidate shape mismatch with configured horizon")
    n_state_vars = (T + 1) * nx
    n_ctrl_vars = (T + 1) * nu
    qdiag = cfg.q_diag()
    a_max = np.asarray(cfg.a_max, dtype=float)
    v_max = np.asarray(cfg.v_max, dtype=float)

    # risk field expansion per step
    rho, grad, hess = cvar_derivatives_batch(ctx, xs[:, 0], xs[:, 1])

    # orientation terms per step (skipped where the normal is unknown)
    omegas = {}
    if ctx.normal_field is not None:
        for k in range(1, T + 1):
            try:
                omegas[k] = ctx.normal_field.orientation_and_gradient(
                    (xs[k, 0], xs[k, 1], xs[k, 2])
                )
            except UnknownNormalError:
                continue

    # signed-distance terms: (k, sd, row over [dpx, dpy, dth])
    sd_terms = []
    if ctx.obstacles:
        centroids = np.array([o.centroid for o in ctx.obstacles])
        radii = np.array([o.radius for o in ctx.obstacles])
        for k in range(1, T + 1):
            gaps = np.hypot(centroids[:, 0] - xs[k, 0], centroids[:, 1] - xs[k, 1])
            near = np.nonzero(gaps <= cfg.sd_activation + radii)[0]
            if near.size == 0:
                continue
            if near.size > cfg.sd_max_per_step:
                near = near[np.argsort(gaps[near] - radii[near])[: cfg.sd_max_per_step]]
            foot = footprint_polygon(xs[k, 0], xs[k, 1], xs[k, 2], *cfg.footprint)
            for j in near:
                sd, pa, _, normal = signed_distance_witness(foot, ctx.obstacles[j])
                lever = pa - xs[k, :2]
                dth = float(normal[0] * -lever[1] + normal[1] * lever[0])
                sd_terms.append((k, sd, np.array([normal[0], normal[1], dth])))

    # slack allocation: one per soft constraint
    n_vel_rows = T * (3 if cfg.model == "omni6" else 1)
    n_speed_rows = T * (3 if cfg.model == "omni6" else 2)
    n_orient = 2 * len(omegas)
    n_sd = len(sd_terms)
    n_slack = n_vel_rows + n_speed_rows + n_orient + n_sd
    n = n_state_vars + n_ctrl_vars + n_slack
    u_off = n_state_vars
    s_off = n_state_vars + n_ctrl_vars

    P = np.zeros((n, n))
    q = np.zeros(n)

    def xi(k):
        return slice(k * nx, (k + 1) * nx)

    def ui(k):
        return slice(u_off + k * nu, u_off + (k + 1) * nu)

    # tracking cost
    for k in range(T + 1):
        err = xs[k] - ref_states[k]
        err[2] = wrap_angle(err[2])
        idx = np.arange(k * nx, (k + 1) * nx)
        P[idx, idx] += 2.0 * qdiag
        q[xi(k)] += 2.0 * qdiag * err

    # CVaR cost: w * (rho + g'dp + dp'H dp)
    for k in range(T + 1):
        sl = slice(k * nx, k * nx + 2)
        P[sl, sl] += 2.0 * cfg.w_risk * hess[k]
        q[k * nx : k * nx + 2] += cfg.w_risk * grad[k]

    # slack penalty
    for i in range(n_slack):
        P[s_off + i, s_off + i] += 2.0 * cfg.lambda_slack

    rows = []
    lo = []
    hi = []
    kinds = []

    def add_row(pairs, lb, ub, kind):
        rows.append(pairs)
        lo.append(lb)
        hi.append(ub)
        kinds.append(kind)

    def sparse_row(pairs):
        return list(pairs)

    # initial condition dx0 = 0
    for i in range(nx):
        add_row(sparse_row([(i, 1.0)]), 0.0, 0.0, "init")

    # dynamics: dx_{k+1} - A_k dx_k - B_k du_k = f(xh,uh) - xh_{k+1}
    for k in range(T):
        A, B = linearize_dynamics(xs[k], us[k], cfg.dt, cfg.kappa, cfg.model)
        step = rollout(xs[k], us[k : k + 1], cfg.dt, cfg.kappa, cfg.model)[1]
        defect = step - xs[k + 1]
        for i in range(nx):
            pairs = [((k + 1) * nx + i, 1.0)]
            pairs += [(k * nx + j, -A[i, j]) for j in range(nx) if A[i, j] != 0.0]
            pairs += [(u_off + k * nu + j, -B[i, j]) for j in range(nu) if B[i, j] != 0.0]
            add_row(sparse_row(pairs), defect[i], defect[i], "dynamics")

    # control limits
    for k in range(T):
        for j in range(nu):
            add_row(sparse_row([(u_off + k * nu + j, 1.0)]),
                    -a_max[j] - us[k, j], a_max[j] - us[k, j], "control")

    slack_idx = 0

    def soft_two_sided(coeffs, lb, ub, kind):
        nonlocal slack_idx
        s = s_off + slack_idx
        slack_idx += 1
        add_row(coeffs + [(s, 1.0)], lb, np.inf, kind)
        add_row(coeffs + [(s, -1.0)], -np.inf, ub, kind)

    def soft_lower(coeffs, lb, kind):
        nonlocal slack_idx
        s = s_off + slack_idx
        slack_idx += 1
        add_row(coeffs + [(s, 1.0)], lb, np.inf, kind)

    def soft_upper(coeffs, ub, kind):
        nonlocal slack_idx
        s = s_off + slack_idx
        slack_idx += 1
        add_row(coeffs + [(s, -1.0)], -np.inf, ub, kind)

    # velocity limits (soft)
    vel_indices = (3, 4, 5) if cfg.model == "omni6" else (3,)
    for k in range(1, T + 1):
        for j, idx in enumerate(vel_indices):
            soft_two_sided(sparse_row([(k * nx + idx, 1.0)]),
                           -v_max[j] - xs[k, idx], v_max[j] - xs[k, idx], "velocity")

    # risk-coupled speed bounds (soft)
    for k in range(1, T + 1):
        rho_eff = max(rho[k], cfg.rho_speed_floor)
        gk = grad[k]
        if cfg.model == "omni6":
            v = xs[k, 3:5]
            speed = float(np.hypot(*v))
            direction = v / speed if speed > 1e-9 else np.array([1.0, 0.0])
            coeffs = sparse_row([
                (k * nx + 3, direction[0]), (k * nx + 4, direction[1]),
                (k * nx + 0, -cfg.gamma_v * gk[0]), (k * nx + 1, -cfg.gamma_v * gk[1]),
            ])
            soft_upper(coeffs, cfg.gamma_v * rho_eff - speed, "speed_risk")
            for sgn in (1.0, -1.0):
                coeffs = sparse_row([
                    (k * nx + 5, sgn),
                    (k * nx + 0, -cfg.gamma_theta * gk[0]),
                    (k * nx + 1, -cfg.gamma_theta * gk[1]),
                ])
                soft_upper(coeffs, cfg.gamma_theta * rho_eff - sgn * xs[k, 5], "speed_risk")
        else:
            for sgn in (1.0, -1.0):
                coeffs = sparse_row([
                    (k * nx + 3, sgn),
                    (k * nx + 0, -cfg.gamma_v * gk[0]),
                    (k * nx + 1, -cfg.gamma_v * gk[1]),
                ])
                soft_upper(coeffs, cfg.gamma_v * rho_eff - sgn * xs[k, 3], "speed_risk")

    # orientation limits (soft): |grad·ds + omega| <= omega_max
    for k, (omega, gradw) in sorted(omegas.items()):
        for row_i in range(2):
            coeffs = sparse_row([
                (k * nx + 0, gradw[row_i, 0]),
                (k * nx + 1, gradw[row_i, 1]),
                (k * nx + 2, gradw[row_i, 2]),
            ])
            soft_two_sided(coeffs, -cfg.omega_max[row_i] - omega[row_i],
                           cfg.omega_max[row_i] - omega[row_i], "orientation")

    # obstacle signed-distance rows (soft): sd + n·ds >= 0
    for k, sd, n_row in sd_terms:
        coeffs = sparse_row([
            (k * nx + 0, n_row[0]), (k * nx + 1, n_row[1]), (k * nx + 2, n_row[2]),
        ])
        soft_lower(coeffs, -sd, "signed_distance")

    # trust-region boxes
    for k in range(T + 1):
        for i in range(nx):
            add_row(sparse_row([(k * nx + i, 1.0)]), -cfg.eps_x, cfg.eps_x, "box_x")
    for k in range(T + 1):
        for j in range(nu):
            add_row(sparse_row([(u_off + k * nu + j, 1.0)]), -cfg.eps_u, cfg.eps_u, "box_u")

    # slack nonnegativity
    for i in range(n_slack):
        add_row(sparse_row([(s_off + i, 1.0)]), 0.0, np.inf, "slack")

    A = np.zeros((len(rows), n))
    for i, pairs in enumerate(rows):
        for idx, val in pairs:
            A[i, idx] += val
    problem = QpProblem(P, q, A, np.array(lo), np.array(hi))
    layout = QpLayout(n_x=nx, n_u=nu, horizon=T, n_slack=n_slack,
                      row_kinds=kinds, u_offset=u_off, slack_offset=s_off)
    return problem, layout


@dataclass
class LinesearchResult:
    gamma: float          # applied step scale (0 when not solved)
    gamma_next: float     # warm-start value for the next planning loop
    solved: bool
    controls: np.ndarray  # accepted control sequence
    cost: float
    violations: int


def linesearch(candidate, delta_u, ref_states, ctx, cfg, gamma_init):
    """Backtracking/growing step rule on the control correction.

    Accepts the first gamma whose rolled-out cost and obstacle-violation
    count both do not increase, then doubles gamma (capped) for the next
    planning loop; otherwise halves gamma (floored).  ``solved`` is False
    when no step is accepted within the iteration budget.
    """
    qdiag = cfg.q_diag()
    base_states = rollout(candidate.states[0], candidate.controls, cfg.dt, cfg.kappa, cfg.model)
    c0, o0, _ = kernels.eval_trajectory(
        base_states, ref_states, qdiag, cfg.w_risk, ctx.cvar, ctx.lethal,
        ctx.origin, ctx.resolution,
    )
    gamma = float(np.clip(gamma_init, cfg.ls_gamma_min, cfg.ls_gamma_max))
    for _ in range(cfg.ls_max_iteration):
        trial = candidate.controls + gamma * delta_u
        states = rollout(candidate.states[0], trial, cfg.dt, cfg.kappa, cfg.model)
        ci, oi, _ = kernels.eval_trajectory(
            states, ref_states, qdiag, cfg.w_risk, ctx.cvar, ctx.lethal,
            ctx.origin, ctx.resolution,
        )
        if ci <= c0 and oi <= o0:
            return LinesearchResult(
                gamma=gamma,
                gamma_next=min(2.0 * gamma, cfg.ls_gamma_max),
                solved=True, controls=trial, cost=float(ci), violations=int(oi),
            )
        gamma = max(gamma / 2.0, cfg.ls_gamma_min)
    return LinesearchResult(gamma=0.0, gamma_next=gamma, solved=False,
                            controls=candidate.controls, cost=float(c0), violations=int(o0))


def _annotated(states, controls, ref_states, ctx, cfg, source):
    qdiag = cfg.q_diag()
    cost, violations, step_cvar = kernels.eval_trajectory(
        states, ref_states, qdiag, cfg.w_risk, ctx.cvar, ctx.lethal,
        ctx.origin, ctx.resolution,
    )
    return Trajectory(dt=cfg.dt, states=states, controls=controls,
                      step_cvar=np.asarray(step_cvar), feasible=violations == 0,
                      source=source, cost=float(cost), violations=int(violations))


class MpcPlanner:
    """Stateful receding-horizon planner (previous solution + warm starts)."""

    def __init__(self, cfg=None):
        self.cfg = cfg if cfg is not None else MpcConfig()
        self.prev_controls = None
        self.gamma = self.cfg.ls_gamma0
        self.cycle = 0
        self._warm = None

    def reset(self):
        self.prev_controls = None
        self.gamma = self.cfg.ls_gamma0
        self.cycle = 0
        self._warm = None

    def plan(self, x0, geo_path, ctx):
        """One receding-horizon planning call.

        Returns (Trajectory, status) with status "refined" after a
        successful SQP pass, "library" when falling back to the best
        collision-free candidate, or "emergency" with a stopping sequence.
        Never raises on solver failure.
        """
        cfg = self.cfg
        x0 = np.asarray(x0, dtype=float)
        if not np.all(np.isfinite(x0)):
            raise ValueError("non-finite initial state")
        rng = np.random.default_rng([cfg.seed, self.cycle])
        self.cycle += 1
        ref = build_reference(x0, geo_path, cfg)
        waypoints = geo_path.waypoints if geo_path is not None else None

        # shift previous solution forward one step
        prev = None
        if self.prev_controls is not None and len(self.prev_controls) == cfg.horizon:
            prev = np.vstack([self.prev_controls[1:], self.prev_controls[-1:]])

        solved = False
        current = prev
        candidate = None
        static = static_library_members(x0, waypoints, rng, cfg)
        for _ in range(cfg.qp_iterations):
            library = generate_trajectory_library(x0, waypoints, current, rng, cfg,
                                                  static=static)
            candidate, all_violate = choose_candidate(library, ref, ctx, cfg)
            if all_violate:
                stop = stopping_controls(x0, cfg.horizon, cfg.dt,
                                         np.asarray(cfg.a_max), cfg.kappa, cfg.model)
                states = rollout(x0, stop, cfg.dt, cfg.kappa, cfg.model)
                traj = _annotated(states, stop, ref, ctx, cfg, "stopping")
                self.prev_controls = stop
                return traj, STATUS_EMERGENCY
            try:
                problem, layout = build_qp(candidate, ref, ctx, cfg)
                warm = None
                if self._warm is not None and self._warm[0].size == problem.num_vars \
                        and self._warm[1].size == problem.num_constraints:
                    warm = self._warm
                sol = solve_qp(problem, cfg.qp_tol_abs, cfg.qp_tol_rel, cfg.qp_max_iter,
                               warm_start=warm, check_every=10)
            except (ValueError, np.linalg.LinAlgError):
                solved = False
                current = candidate.controls
                continue
            # a max_iter iterate is still a usable direction; the linesearch
            # rejects it unless cost and violations both hold the line
            if not np.all(np.isfinite(sol.x)):
                solved = False
                current = candidate.controls
                continue
            self._warm = (sol.x, sol.y)
            delta_u = layout.extract_du(sol.x)
            ls = linesearch(candidate, delta_u, ref, ctx, cfg, self.gamma)
            self.gamma = ls.gamma_next
            solved = ls.solved
            current = ls.controls if ls.solved else candidate.controls

        if solved and current is not None:
            states = rollout(x0, current, cfg.dt, cfg.kappa, cfg.model)
            traj = _annotated(states, current, ref, ctx, cfg, "refined")
            if traj.violations == 0:
                self.prev_controls = current
                return traj, STATUS_REFINED
        # fall back to best collision-free library member
        if candidate is not None and candidate.violations == 0:
            self.prev_controls = candidate.controls
            return candidate, STATUS_LIBRARY
        stop = stopping_controls(x0, cfg.horizon, cfg.dt,
                                 np.asarray(cfg.a_max), cfg.kappa, cfg.model)
        states = rollout(x0, stop, cfg.dt, cfg.kappa, cfg.model)
        traj = _annotated(states, stop, ref, ctx, cfg, "stopping")
        self.prev_controls = stop
        return traj, STATUS_EMERGENCY
