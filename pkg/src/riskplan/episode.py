"""Closed-loop episode execution: sense, map, plan, act, recover.

Per cycle: sensor observation -> risk map update -> geometric replan at a
fixed cadence (or when the lethal mask changes near the path) -> one
kinodynamic MPC step -> exact application of the first control (perfect
tracking) -> behavior supervision.  Terminates at the goal tolerance, on
a stuck/emergency signal, on planner unreachability after the risk level
has been fully relaxed, or at the step cap.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .behaviors import BehaviorConfig, BehaviorSupervisor
from .dynamics import rollout, wrap_angle
from .geom_planner import plan_astar
from .mapping import RiskFactorConfig, RiskMapper
from .mpc import STATUS_EMERGENCY, MpcConfig, MpcPlanner, RiskContext
from .orientation import NormalField, UnknownNormalError
from .sensor import NoiseConfig, sensor_model
from .world import gen_world, truth_risk_at


@dataclass
class SimConfig:
    """Everything an episode needs besides the world itself.

    The mapper's step threshold (0.08 m) sits below the worlds' truth
    threshold (0.10 m) so borderline hazards are flagged before they are
    stepped on, and the threshold range slope is matched to the sensor
    noise slope so remote cells are judged against what the sensor can
    actually resolve at that range.
    """

    sensor_range: float = 6.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    # uncertainty tracks observation poverty: unknown and barely-observed
    # cells carry large sigma while well-fused cells shrink toward the
    # truth.  High risk levels then pay to stay on confirmed ground while
    # low levels gamble through the unobserved -- which is what separates
    # the path-length and max-risk distributions.  Lethal masking comes
    # from the per-factor detectors only (the CVaR threshold is parked
    # high) so the risk level shapes routes through cost rather than by
    # closing corridors.
    risk: RiskFactorConfig = field(default_factory=lambda: RiskFactorConfig(
        step_threshold=0.08, threshold_range_slope=0.008,
        risk_sigma_range_slope=0.003, sigma_mu_scale=2.0,
        base_sigma=0.005, baseline_mu=0.07,
        unknown_prior_mean=0.08, unknown_prior_sigma=0.25, lethal_cvar=2.0,
        coverage_distance=0.5, negobs_uncovered_mean=0.3))
    mpc: MpcConfig = field(default_factory=lambda: MpcConfig(
        model="diff4", horizon=10, dt=0.125, kappa=0.0, qp_iterations=1,
        qp_max_iter=250, rho_max=2.0))
    behavior: BehaviorConfig = field(default_factory=lambda: BehaviorConfig(
        wiggle_window=120.0))
    replan_every: int = 10
    step_cap: int = 300
    goal_tolerance: float = 0.45
    # length weight of the geometric objective; the risk level trades
    # against this anchor (higher alpha discounts length relative to risk)
    geo_lambda: float = 3.5
    lethal_inflation_cells: int = 2
    unreachable_patience: int = 3   # consecutive failed replans at alpha_min
    footprint_radius: float = 0.4
    mapper_alpha_floor: float = 0.05


@dataclass
class EpisodeRecord:
    seed: int
    alpha: float
    success: bool
    reason: str
    steps: int
    path_length: float
    max_truth_risk: float
    max_step_cvar: float
    j_pos: float
    wall_ms: float
    events: list
    trajectory: np.ndarray   # rows: t, x, y, theta, vx, [vy, vth,] u..., est cvar
    goal: tuple
    final_distance: float


def _inflate(mask, cells):
    if cells <= 0:
        return mask
    from scipy import ndimage

    return ndimage.binary_dilation(mask, iterations=int(cells))


def _plan_geo(mapper, start_cell, goal_cell, cfg, rho_override=None):
    grid = mapper.grid
    lethal = grid["lethal"] > 0.5
    if rho_override is not None:
        # escape relaxation lifts the CVaR threshold but keeps confirmed
        # negative obstacles and water masked
        lethal = (grid["cvar"] > rho_override) \
            | (grid["risk_negative_obstacle_lethal"] > 0.5) \
            | (grid["risk_water_lethal"] > 0.5)
    lethal = _inflate(lethal, cfg.lethal_inflation_cells)
    lethal = lethal.astype(float)
    # neither the robot's own pocket nor the goal pocket is maskable:
    # transient detections must not wall the planner in or out
    for rr, cc in (start_cell, goal_cell):
        lethal[max(rr - 1, 0) : rr + 2, max(cc - 1, 0) : cc + 2] = 0.0
    try:
        return plan_astar(grid, start_cell, goal_cell, lam=cfg.geo_lambda,
                          lethal_layer=lethal)
    except ValueError:
        return None


def run_episode(world_or_spec, alpha, cfg=None, start=None, goal=None):
    """Run one episode; never raises on planner failure.

    Returns an :class:`EpisodeRecord` whose ``reason`` is one of
    "goal_reached", "unreachable", "stuck", "emergency_stop", "step_cap".
    """
    cfg = cfg if cfg is not None else SimConfig()
    world = world_or_spec if hasattr(world_or_spec, "grid") else gen_world(world_or_spec)
    start = tuple(start) if start is not None else world.start
    goal = tuple(goal) if goal is not None else world.goal
    t_begin = time.perf_counter()

    grid_t = world.grid
    mapper = RiskMapper(grid_t.origin, grid_t.resolution, grid_t.width, grid_t.height,
                        cfg=cfg.risk, alpha=alpha, footprint_radius=cfg.footprint_radius)
    planner = MpcPlanner(cfg.mpc)
    sup = BehaviorSupervisor(cfg.behavior, posture=alpha)
    # the sensor stream depends on the world only, so paired runs across
    # risk levels face identical measurement noise
    rng = np.random.default_rng([world.spec.seed, 77])
    truth_normals = NormalField(grid_t["elevation"], grid_t.origin, grid_t.resolution)

    model = cfg.mpc.model
    nx = cfg.mpc.n_x
    heading0 = np.arctan2(goal[1] - start[1], goal[0] - start[0])
    x = np.zeros(nx)
    x[0], x[1], x[2] = start[0], start[1], heading0

    dt = cfg.mpc.dt
    path = None
    cycles_since_plan = cfg.replan_every  # plan on the first cycle
    alpha_cur = alpha
    unreachable_streak = 0
    pending = []            # queued override controls (wiggle)
    escape_goal = None
    rho_relax = None
    emergency_streak = 0    # consecutive MPC emergency stops
    rows = []
    max_truth = 0.0
    max_cvar = 0.0
    length = 0.0
    reason = "step_cap"
    success = False
    steps = 0

    goal_cell = tuple(int(v) for v in grid_t.world_to_cell(goal[0], goal[1]))

    for step_i in range(cfg.step_cap):
        steps = step_i + 1
        obs = sensor_model(world, x, cfg.sensor_range, cfg.noise, rng)
        grid = mapper.update(obs, (x[0], x[1]))

        cell = tuple(int(v) for v in grid.world_to_cell(x[0], x[1]))
        on_lethal = bool(grid["lethal"][cell] > 0.5)

        # geometric replanning cadence / lethal change on the path
        target_cell = goal_cell if escape_goal is None else escape_goal
        cycles_since_plan += 1
        need_plan = path is None or cycles_since_plan >= cfg.replan_every
        if path is not None and not need_plan:
            on_path_lethal = grid["lethal"][path.cells[:, 0], path.cells[:, 1]] > 0.5
            if on_path_lethal.any():
                need_plan = True
        feasible = path is not None
        if need_plan:
            path = _plan_geo(mapper, cell, target_cell, cfg, rho_override=rho_relax)
            cycles_since_plan = 0
            feasible = path is not None
            if feasible:
                unreachable_streak = 0
            else:
                unreachable_streak += 1

        # behaviors
        try:
            pitch = truth_normals.orientation_and_gradient((x[0], x[1], x[2]))[0][0]
        except UnknownNormalError:
            pitch = 0.0
        speed = float(abs(x[3])) if model == "diff4" else float(np.hypot(x[3], x[4]))
        commanded = bool(pending) or (path is not None)
        # a sustained run of MPC emergency stops counts as an infeasible
        # plan: the risk level relaxes so a riskier but feasible motion
        # can be found
        mpc_blocked = emergency_streak >= 5
        cmd = sup.step(
            dt, (x[0], x[1], x[2]), pitch, speed, commanded,
            feasible and not mpc_blocked, on_lethal,
            grid=grid, robot_cell=cell, max_rho=cfg.mpc.rho_max,
            clearance_deficit=float(grid_t["ceiling_deficit"][cell]),
            plan_attempted=(need_plan or mpc_blocked) and rho_relax is None,
            override_active=bool(pending),
        )
        if mpc_blocked:
            emergency_streak = 0
            path = None  # replan at the relaxed risk level next cycle
        if cmd.mission_end is not None:
            reason = cmd.mission_end
            break
        if cmd.alpha != alpha_cur:
            alpha_cur = max(cmd.alpha, cfg.mapper_alpha_floor)
            mapper.refresh_cvar(alpha_cur)
        if cmd.mode == "escape_lethal" and cmd.escape_goal is not None:
            escape_goal = tuple(cmd.escape_goal)
            for rho in cmd.rho_schedule:
                rho_relax = rho
                path = _plan_geo(mapper, cell, escape_goal, cfg, rho_override=rho)
                if path is not None:
                    break
            cycles_since_plan = 0
            feasible = path is not None
        if cmd.mode == "nominal" and escape_goal is not None and not on_lethal:
            escape_goal = None
            rho_relax = None
            path = None
        if cmd.override_controls is not None and not pending:
            pending = list(np.asarray(cmd.override_controls)[:, : cfg.mpc.n_u])
        if cmd.override_path is not None:
            # backtrack at low speed along the recorded poses
            back = cmd.override_path
            tgt = back[min(2, len(back) - 1)]
            vec = np.array([tgt[0] - x[0], tgt[1] - x[1]])
            d = float(np.hypot(*vec))
            stepd = min(cfg.behavior.backtrack_speed * dt, d)
            if d > 1e-9:
                x[0] += vec[0] / d * stepd
                x[1] += vec[1] / d * stepd
            x[3:] = 0.0
            rows.append(_row(step_i * dt, x, np.zeros(cfg.mpc.n_u), 0.0, model))
            length += stepd
            continue

        if unreachable_streak > 0 and alpha_cur <= cfg.behavior.alpha_min + 1e-9 \
                and unreachable_streak >= cfg.unreachable_patience:
            reason = "unreachable"
            break

        # kinodynamic planning and perfect tracking of the first control
        if pending:
            u0 = np.asarray(pending.pop(0), dtype=float)
            step_cvar = 0.0
        else:
            reach = cfg.mpc.sd_activation + cfg.mpc.v_cruise * cfg.mpc.horizon * dt
            ctx = RiskContext.from_grid(grid, cfg.mpc, center=(x[0], x[1]),
                                        window_m=reach, rho_max=rho_relax)
            traj, status = planner.plan(x, path, ctx)
            emergency_streak = emergency_streak + 1 if status == STATUS_EMERGENCY else 0
            u0 = traj.controls[0]
            step_cvar = float(traj.step_cvar[1]) if traj.step_cvar is not None else 0.0

        x_new = rollout(x, u0.reshape(1, -1), dt, cfg.mpc.kappa, model)[1]
        x_new[2] = wrap_angle(x_new[2])
        length += float(np.hypot(x_new[0] - x[0], x_new[1] - x[1]))
        x = x_new
        max_truth = max(max_truth, truth_risk_at(world, x[0], x[1]))
        max_cvar = max(max_cvar, step_cvar)
        rows.append(_row(step_i * dt, x, u0, step_cvar, model))

        d_goal = float(np.hypot(goal[0] - x[0], goal[1] - x[1]))
        if d_goal <= cfg.goal_tolerance:
            success = True
            reason = "goal_reached"
            length += d_goal  # account the final snap to the goal point
            break

    wall_ms = (time.perf_counter() - t_begin) * 1000.0
    final_distance = float(np.hypot(goal[0] - x[0], goal[1] - x[1]))
    j_pos = _executed_path_risk(mapper, rows, alpha)
    return EpisodeRecord(
        seed=world.spec.seed, alpha=alpha, success=success, reason=reason,
        steps=steps, path_length=float(length), max_truth_risk=float(max_truth),
        max_step_cvar=float(max_cvar), j_pos=j_pos, wall_ms=wall_ms,
        events=list(sup.events), trajectory=np.array(rows) if rows else np.zeros((0, 4)),
        goal=goal, final_distance=final_distance,
    )


def _row(t, x, u, step_cvar, model):
    return [t, *x.tolist(), *np.asarray(u).tolist(), step_cvar]


def _executed_path_risk(mapper, rows, alpha):
    """Compounded CVaR of the executed positions under the final map."""
    if not rows:
        return 0.0
    grid = mapper.grid
    xs = np.array([r[1] for r in rows])
    ys = np.array([r[2] for r in rows])
    rr, cc = grid.world_to_cell(xs, ys)
    ok = grid.in_bounds(rr, cc)
    cv = grid["cvar"][rr[ok], cc[ok]]
    mu = grid["risk_mu"][rr[ok], cc[ok]]
    if cv.size == 0:
        return 0.0
    return float(mu[0] + cv[1:].sum())
