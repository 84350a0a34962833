"""Mission-level recovery behaviors, risk-level adjustment, gait selection.

A small state machine steps once per control cycle.  Decisions are pure
functions of (state, inputs); transitions are appended to a structured
event log.  Modes: nominal, tilt_recovery, wiggle, escape_lethal,
emergency_stop.
"""

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels

MODES = ("nominal", "tilt_recovery", "wiggle", "escape_lethal", "emergency_stop")
GAITS = ("walk", "stair", "crawl", "crouch")

CROUCH_DEFICIT = 0.16   # m: ceiling within this of the robot height
SLIP_THRESHOLD = 0.5    # crawl when p(slip) exceeds this


@dataclass
class BehaviorConfig:
    alpha_min: float = 0.1
    alpha_delta: float = 0.2
    pitch_limit: float = 0.35       # rad
    pitch_release: float = 0.8      # hysteresis factor on the limit
    backtrack_speed: float = 0.2    # m/s
    wiggle_window: float = 5.0      # s of commanded non-motion before wiggling
    wiggle_speed_eps: float = 0.05  # m/s counted as "not moving"
    wiggle_max_tries: int = 3
    wiggle_displacement_eps: float = 0.2  # m (one cell) to call a wiggle successful
    wiggle_duration: float = 2.0    # s of figure-8 controls per attempt
    lethal_dwell: float = 2.0       # s inside lethal terrain before escaping
    history_len: int = 200


@dataclass
class BehaviorState:
    mode: str = "nominal"
    alpha_current: float = 0.9
    stuck_timer: float = 0.0
    lethal_timer: float = 0.0
    wiggle_tries: int = 0
    wiggle_anchor: tuple | None = None
    gait: str = "walk"
    pose_history: deque = field(default_factory=lambda: deque(maxlen=200))

    def record_pose(self, pose):
        self.pose_history.append(tuple(float(v) for v in pose))


def adjust_alpha(alpha, feasible, posture, cfg):
    """Lower the risk level after an infeasible plan, relax it back after.

    Infeasible: alpha drops by alpha_delta (floored at alpha_min) so a
    riskier but feasible plan can be found.  Feasible: alpha recovers
    toward the mission posture at half the step per cycle.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    if not feasible:
        return max(alpha - cfg.alpha_delta, cfg.alpha_min)
    return min(alpha + cfg.alpha_delta / 2.0, posture)


def tilt_recovery(state, pitch, cfg):
    """Backtrack command when pitch exceeds the limit.

    Returns (command, done): command is the reversed recent pose history
    with the backtrack speed, or None outside the behavior.  ``done``
    signals the hysteresis release (|pitch| < pitch_release * limit).
    """
    if state.mode != "tilt_recovery":
        if abs(pitch) <= cfg.pitch_limit:
            return None, False
        if not state.pose_history:
            return "emergency_stop", False
        path = np.array(list(state.pose_history))[::-1]
        return {"path": path, "speed": cfg.backtrack_speed}, False
    if abs(pitch) < cfg.pitch_release * cfg.pitch_limit:
        return None, True
    path = np.array(list(state.pose_history))[::-1]
    return {"path": path, "speed": cfg.backtrack_speed}, False


def figure_eight_controls(duration, dt, accel=1.0, turn_rate=1.5):
    """Bounded figure-8 control sequence [ax, vth] alternating turn sign."""
    steps = max(int(round(duration / dt)), 2)
    half = steps // 2
    controls = np.zeros((steps, 2))
    controls[:, 0] = np.where(np.arange(steps) % 4 < 2, accel, -accel)
    controls[:half, 1] = turn_rate
    controls[half:, 1] = -turn_rate
    return controls


def wiggle_check(state, commanded, speed, dt, cfg):
    """Detect a stuck robot and emit a wiggle command.

    Triggers after ``wiggle_window`` seconds of near-zero speed while
    nonzero commands stream; after ``wiggle_max_tries`` attempts without
    net displacement the robot is declared stuck (mission-end signal).
    Returns one of None, {"controls": ...}, or "stuck".
    """
    if not commanded or speed > cfg.wiggle_speed_eps:
        state.stuck_timer = 0.0
        return None
    state.stuck_timer += dt
    if state.stuck_timer < cfg.wiggle_window:
        return None
    state.stuck_timer = 0.0
    if state.wiggle_tries >= cfg.wiggle_max_tries:
        return "stuck"
    state.wiggle_tries += 1
    return {"controls": figure_eight_controls(cfg.wiggle_duration, dt)}


def escape_lethal(grid, robot_cell, max_rho, n_steps=3, rho_cap=0.9):
    """Escape goal and relaxed risk-threshold schedule out of lethal terrain.

    The goal is the non-lethal cell minimizing (lethal cells crossed on
    the straight raster line from the robot, then distance, then row-major
    index).  The schedule raises the allowed risk threshold in ``n_steps``
    increments toward ``rho_cap``; callers walk it until the geometric
    planner reports the goal reachable.  The cap stays below the mean
    assigned to confirmed hazards, so relaxation never opens cells the map
    is certain about.  Returns (goal_cell, schedule), or (None, []) when
    no non-lethal cell exists (mission-end).
    """
    lethal = grid["lethal"] > 0.5
    h, w = lethal.shape
    r0, c0 = int(robot_cell[0]), int(robot_cell[1])
    free = ~lethal
    if not free.any():
        return None, []
    crossings = kernels.crossing_field(lethal, r0, c0)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dist2 = (rows - r0) ** 2 + (cols - c0) ** 2
    # lexicographic: fewest crossings, then nearest, then row-major index
    order = np.lexsort((np.arange(h * w), dist2.ravel(), crossings.ravel()))
    order = order[free.ravel()[order]]
    best = int(order[0])
    goal = (best // w, best % w)
    top = max(rho_cap, max_rho)
    schedule = [max_rho + (top - max_rho) * k / n_steps for k in range(1, n_steps + 1)]
    return goal, schedule


def gait_select(clearance_deficit, p_slip, stair_flag, current_gait):
    """Locomotion gait from terrain triggers: stair > crawl > crouch > walk.

    ``clearance_deficit`` is robot height minus ceiling clearance (m);
    positive values up to 0.16 m are absorbed by crouching.  Slip
    probability above 0.5 selects the crawling gait.  All triggers clear:
    back to walking.
    """
    if not np.isfinite(clearance_deficit) or not np.isfinite(p_slip):
        raise ValueError("gait inputs must be finite")
    if not 0.0 <= p_slip <= 1.0:
        raise ValueError("slip probability must lie in [0, 1]")
    if stair_flag:
        return "stair"
    if p_slip > SLIP_THRESHOLD:
        return "crawl"
    if 0.0 < clearance_deficit <= CROUCH_DEFICIT:
        return "crouch"
    return "walk"


@dataclass
class BehaviorCommand:
    mode: str
    alpha: float
    gait: str
    override_path: np.ndarray | None = None
    override_controls: np.ndarray | None = None
    mission_end: str | None = None
    escape_goal: tuple | None = None
    rho_schedule: list | None = None


class BehaviorSupervisor:
    """Steps the behavior machine once per control cycle."""

    def __init__(self, cfg=None, posture=0.9, alpha0=None):
        self.cfg = cfg if cfg is not None else BehaviorConfig()
        self.posture = float(posture)
        self.state = BehaviorState(alpha_current=alpha0 if alpha0 is not None else posture)
        self.state.pose_history = deque(maxlen=self.cfg.history_len)
        self.events = []
        self._time = 0.0

    def _transition(self, new_mode, trigger):
        if new_mode != self.state.mode:
            self.events.append({
                "t": round(self._time, 6),
                "from": self.state.mode,
                "to": new_mode,
                "trigger": trigger,
            })
            self.state.mode = new_mode

    def step(self, dt, pose, pitch, speed, commanded, plan_feasible, on_lethal,
             grid=None, robot_cell=None, max_rho=0.5,
             clearance_deficit=-1.0, p_slip=0.0, stair_flag=False,
             plan_attempted=True, override_active=False):
        """Advance one cycle; returns a :class:`BehaviorCommand`.

        ``pose`` is (x, y, theta); ``on_lethal`` marks the robot's current
        cell lethal in the planner map; ``plan_feasible`` reports the last
        geometric planning outcome and adjusts the risk level whenever a
        plan was actually attempted this cycle.
        """
        st = self.state
        cfg = self.cfg
        self._time += dt
        st.record_pose(pose)
        if plan_attempted:
            st.alpha_current = adjust_alpha(st.alpha_current, plan_feasible, self.posture, cfg)
        st.gait = gait_select(clearance_deficit, p_slip, stair_flag, st.gait)

        if st.mode == "emergency_stop":
            return BehaviorCommand(st.mode, st.alpha_current, st.gait, mission_end="emergency_stop")

        st.lethal_timer = st.lethal_timer + dt if on_lethal else 0.0

        if st.mode == "tilt_recovery":
            cmd, done = tilt_recovery(st, pitch, cfg)
            if done:
                self._transition("nominal", "pitch_recovered")
                return BehaviorCommand("nominal", st.alpha_current, st.gait)
            return BehaviorCommand(st.mode, st.alpha_current, st.gait,
                                   override_path=cmd["path"] if isinstance(cmd, dict) else None)

        if st.mode == "wiggle":
            anchor = np.asarray(st.wiggle_anchor[:2])
            moved = float(np.hypot(pose[0] - anchor[0], pose[1] - anchor[1]))
            if moved > cfg.wiggle_displacement_eps:
                st.wiggle_tries = 0
                self._transition("nominal", "unstuck")
                return BehaviorCommand("nominal", st.alpha_current, st.gait)
            if override_active:
                # previous figure-8 sequence still executing
                return BehaviorCommand(st.mode, st.alpha_current, st.gait)
            if st.wiggle_tries >= cfg.wiggle_max_tries:
                self._transition("emergency_stop", "wiggle_exhausted")
                return BehaviorCommand("emergency_stop", st.alpha_current, st.gait,
                                       mission_end="stuck")
            st.wiggle_tries += 1
            return BehaviorCommand(st.mode, st.alpha_current, st.gait,
                                   override_controls=figure_eight_controls(cfg.wiggle_duration, dt))

        if st.mode == "escape_lethal":
            if not on_lethal:
                self._transition("nominal", "escaped_lethal")
                return BehaviorCommand("nominal", st.alpha_current, st.gait)
            return BehaviorCommand(st.mode, st.alpha_current, st.gait)

        # nominal: check triggers by severity
        cmd, _ = tilt_recovery(st, pitch, cfg)
        if cmd == "emergency_stop":
            self._transition("emergency_stop", "tilt_without_history")
            return BehaviorCommand("emergency_stop", st.alpha_current, st.gait,
                                   mission_end="emergency_stop")
        if isinstance(cmd, dict):
            self._transition("tilt_recovery", "pitch_exceeded")
            return BehaviorCommand("tilt_recovery", st.alpha_current, st.gait,
                                   override_path=cmd["path"])
        if on_lethal and st.lethal_timer >= cfg.lethal_dwell and grid is not None:
            goal, schedule = escape_lethal(grid, robot_cell, max_rho)
            if goal is None:
                self._transition("emergency_stop", "no_escape_goal")
                return BehaviorCommand("emergency_stop", st.alpha_current, st.gait,
                                       mission_end="no_escape")
            self._transition("escape_lethal", "lethal_dwell")
            return BehaviorCommand("escape_lethal", st.alpha_current, st.gait,
                                   escape_goal=goal, rho_schedule=schedule)
        wiggle = wiggle_check(st, commanded, speed, dt, cfg)
        if wiggle == "stuck":
            self._transition("emergency_stop", "wiggle_exhausted")
            return BehaviorCommand("emergency_stop", st.alpha_current, st.gait,
                                   mission_end="stuck")
        if isinstance(wiggle, dict):
            st.wiggle_anchor = tuple(pose)
            self._transition("wiggle", "no_motion_under_command")
            return BehaviorCommand("wiggle", st.alpha_current, st.gait,
                                   override_controls=wiggle["controls"])
        return BehaviorCommand("nominal", st.alpha_current, st.gait)

    def write_events(self, path):
        """Append-only JSONL event log of mode transitions."""
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev) + "\n")
