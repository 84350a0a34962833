"""Candidate trajectory library for the kinodynamic planner.

Members span five sources: the previous accepted solution, a braking
(stopping) sequence, a geometric-path-following rollout, heuristic arcs
(v-turns, u-turns, varying curvatures), and randomly perturbed control
sequences.  All members are rollout-consistent by construction.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dynamics import CONTROL_DIM, _MODEL_CODE, rollout, wrap_angle


@dataclass
class Trajectory:
    """Time-indexed state/control sequence with per-step risk annotations."""

    dt: float
    states: np.ndarray            # (T+1, n_x)
    controls: np.ndarray          # (T, n_u)
    step_cvar: np.ndarray | None = None
    feasible: bool = True
    source: str = "heuristic"     # previous | stopping | geo-follow | heuristic | random
    cost: float = np.inf
    violations: int = -1

    def rollout_defect(self, kappa, model="omni6"):
        """Max per-step deviation from re-integrating the controls."""
        ref = rollout(self.states[0], self.controls, self.dt, kappa, model)
        return float(np.max(np.abs(ref - self.states)))

    @property
    def terminal_speed(self):
        x = self.states[-1]
        if x.shape[0] >= 5:
            return float(np.hypot(x[3], x[4]))
        return float(abs(x[3]))


def clamp_controls(controls, a_max):
    return np.clip(controls, -np.asarray(a_max), np.asarray(a_max))


def stopping_controls(x0, T, dt, a_max, kappa, model="omni6"):
    """Braking ramp: decelerate every velocity toward zero at the limits."""
    nu = CONTROL_DIM[model]
    x = np.asarray(x0, dtype=float).copy()
    controls = np.zeros((T, nu))
    for k in range(T):
        if model == "omni6":
            u = np.array([
                -np.clip(x[3] / dt, -a_max[0], a_max[0]),
                -np.clip(x[4] / dt, -a_max[1], a_max[1]),
                -np.clip(x[5] / dt, -a_max[2], a_max[2]),
            ])
        else:
            u = np.array([-np.clip(x[3] / dt, -a_max[0], a_max[0]), 0.0])
        controls[k] = u
        x = kernels.rollout(_MODEL_CODE[model], x, u.reshape(1, -1), dt, kappa)[1]
    return controls


def _clamp(v, lo, hi):
    return lo if v < lo else (hi if v > hi else v)


def _steer_controls(x0, T, dt, kappa, model, a_max, v_max, v_des_fn, turn_rate_fn):
    """Roll a simple pursuit controller: accelerate to v_des, steer to a
    commanded heading rate (compensating the kappa coupling)."""
    nu = CONTROL_DIM[model]
    x = np.asarray(x0, dtype=float).copy()
    controls = np.zeros((T, nu))
    turn_gate = kappa < 1.0 - 1e-9
    code = _MODEL_CODE[model]
    u = np.zeros(nu)
    for k in range(T):
        v_des = v_des_fn(k, x)
        rate_des = turn_rate_fn(k, x)
        ax = _clamp((v_des - x[3]) / dt, -a_max[0], a_max[0])
        if model == "omni6":
            ay = _clamp(-x[4] / dt, -a_max[1], a_max[1])
            vth_des = (rate_des - kappa * x[3]) / (1.0 - kappa) if turn_gate else 0.0
            vth_des = _clamp(vth_des, -v_max[2], v_max[2])
            ath = _clamp((vth_des - x[5]) / dt, -a_max[2], a_max[2])
            u[0], u[1], u[2] = ax, ay, ath
        else:
            vth = (rate_des - kappa * x[3]) / (1.0 - kappa) if turn_gate else 0.0
            u[0], u[1] = ax, _clamp(vth, -a_max[1], a_max[1])
        controls[k] = u
        x = kernels.rollout(code, x, u.reshape(1, -1), dt, kappa)[1]
    return controls


def geo_follow_controls(x0, waypoints, T, dt, kappa, model, a_max, v_max,
                        v_cruise, lookahead):
    """Pure-pursuit style tracking of the geometric path waypoints."""
    waypoints = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    seg = np.diff(waypoints, axis=0)
    seg_lengths = np.hypot(seg[:, 0], seg[:, 1])

    def v_des(k, x):
        err = _heading_error(x, waypoints, seg_lengths, lookahead)
        return v_cruise * _clamp(1.0 - abs(err) / np.pi, 0.2, 1.0)

    def rate(k, x):
        err = _heading_error(x, waypoints, seg_lengths, lookahead)
        return _clamp(2.0 * err, -2.0, 2.0)

    return _steer_controls(x0, T, dt, kappa, model, a_max, v_max, v_des, rate)


def _heading_error(x, waypoints, seg_lengths, lookahead):
    d = np.hypot(waypoints[:, 0] - x[0], waypoints[:, 1] - x[1])
    i = int(np.argmin(d))
    # walk forward along the path to the lookahead point
    acc = 0.0
    j = i
    while j < len(seg_lengths) and acc < lookahead:
        acc += seg_lengths[j]
        j += 1
    tx = waypoints[j, 0] - x[0]
    ty = waypoints[j, 1] - x[1]
    if tx * tx + ty * ty < 1e-12:
        return 0.0
    return float(wrap_angle(math.atan2(ty, tx) - x[2]))


def _member(x0, controls, a_max, dt, kappa, model, source):
    controls = clamp_controls(np.asarray(controls, dtype=float), a_max)
    states = rollout(x0, controls, dt, kappa, model)
    return Trajectory(dt=dt, states=states, controls=controls, source=source)


def static_library_members(x0, geo_waypoints, rng, cfg):
    """Library members that depend only on the current state and path:
    stopping, geo-follow, heuristic arcs/turns, random perturbations."""
    T, dt, kappa, model = cfg.horizon, cfg.dt, cfg.kappa, cfg.model
    a_max = np.asarray(cfg.a_max, dtype=float)
    v_max = np.asarray(cfg.v_max, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    members = []

    stop = stopping_controls(x0, T, dt, a_max, kappa, model)
    members.append(_member(x0, stop, a_max, dt, kappa, model, "stopping"))

    if geo_waypoints is not None and len(geo_waypoints) >= 2:
        follow = geo_follow_controls(
            x0, geo_waypoints, T, dt, kappa, model, a_max, v_max,
            cfg.v_cruise, cfg.lookahead,
        )
    else:
        follow = stop
    members.append(_member(x0, follow, a_max, dt, kappa, model, "geo-follow"))

    # heuristic arcs: varying curvature, u-turns both ways, a v-turn
    for rate in cfg.arc_rates:
        members.append(_member(
            x0,
            _steer_controls(x0, T, dt, kappa, model, a_max, v_max,
                            lambda k, x: cfg.v_cruise, lambda k, x, r=rate: r),
            a_max, dt, kappa, model, "heuristic"))
    for sgn in (1.0, -1.0):
        members.append(_member(
            x0,
            _steer_controls(x0, T, dt, kappa, model, a_max, v_max,
                            lambda k, x: 0.3 * cfg.v_cruise,
                            lambda k, x, s=sgn: 2.0 * s),
            a_max, dt, kappa, model, "heuristic"))
    third = max(T // 3, 1)
    members.append(_member(
        x0,
        _steer_controls(x0, T, dt, kappa, model, a_max, v_max,
                        lambda k, x: 0.0 if k < third else -0.5 * cfg.v_cruise,
                        lambda k, x: 0.0),
        a_max, dt, kappa, model, "heuristic"))

    for _ in range(cfg.n_random):
        noise = rng.normal(0.0, cfg.random_scale, size=follow.shape) * a_max
        members.append(_member(x0, follow + noise, a_max, dt, kappa, model, "random"))
    return members


def generate_trajectory_library(x0, geo_waypoints, prev_controls, rng, cfg, static=None):
    """Build the candidate set for one planning iteration.

    Returns a list of rollout-consistent :class:`Trajectory` covering all
    five source tags; deterministic for a fixed ``rng`` state.  ``static``
    may carry the cached state-only members when re-generating inside one
    planning call (only the previous-solution member changes).
    """
    T, dt, kappa, model = cfg.horizon, cfg.dt, cfg.kappa, cfg.model
    a_max = np.asarray(cfg.a_max, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if prev_controls is None or len(prev_controls) != T:
        prev_controls = np.zeros((T, CONTROL_DIM[model]))
    members = [_member(x0, prev_controls, a_max, dt, kappa, model, "previous")]
    if static is None:
        static = static_library_members(x0, geo_waypoints, rng, cfg)
    return members + list(static)


def choose_candidate(library, ref_states, ctx, cfg):
    """Evaluate the library and pick the best non-violating member.

    Annotates every member with cost/violations/per-step CVaR.  Returns
    (best member, all_violate flag); when every member violates the lethal
    constraint the stopping member is returned with the flag set.
    """
    if not library:
        raise ValueError("empty trajectory library")
    qdiag = np.asarray(cfg.q_diag(), dtype=float)
    best = None
    stopping = None
    for traj in library:
        cost, violations, step_cvar = kernels.eval_trajectory(
            traj.states, ref_states, qdiag, cfg.w_risk,
            ctx.cvar, ctx.lethal, ctx.origin, ctx.resolution,
        )
        traj.cost = float(cost)
        traj.violations = int(violations)
        traj.step_cvar = np.asarray(step_cvar, dtype=float)
        traj.feasible = violations == 0
        if traj.source == "stopping" and stopping is None:
            stopping = traj
        if traj.feasible and (best is None or traj.cost < best.cost):
            best = traj
    if best is None:
        return (stopping if stopping is not None else library[0]), True
    return best, False
