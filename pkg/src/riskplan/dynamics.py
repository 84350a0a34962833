"""Vehicle dynamics models and analytic linearization.

Two discrete-time Euler models:

* ``omni6``: state [px, py, pth, vx, vy, vth], controls [ax, ay, ath],
  with heading rate kappa*vx + (1-kappa)*vth; kappa in [0,1] gates how
  much turning-in-place is permitted.
* ``diff4``: differential drive, state [px, py, pth, vx], controls
  [ax, vth_cmd] (no lateral velocity).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

MODELS = ("omni6", "diff4")

_MODEL_CODE = {"omni6": kernels.MODEL_OMNI6, "diff4": kernels.MODEL_DIFF4}
STATE_DIM = {"omni6": 6, "diff4": 4}
CONTROL_DIM = {"omni6": 3, "diff4": 2}


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    return np.arctan2(np.sin(a), np.cos(a))


@dataclass
class RobotState6:
    px: float = 0.0
    py: float = 0.0
    ptheta: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    vtheta: float = 0.0

    def as_array(self):
        return np.array([self.px, self.py, wrap_angle(self.ptheta), self.vx, self.vy, self.vtheta])

    @classmethod
    def from_array(cls, x):
        return cls(*(float(v) for v in x))


@dataclass
class ControlInput:
    """Control vector; [ax, ay, ath] for omni6 or [ax, vth] for diff4."""

    values: np.ndarray

    def as_array(self):
        return np.asarray(self.values, dtype=float)


def dynamics_step(x, u, dt, kappa, model="omni6"):
    """One exact Euler step of the chosen model."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    states = kernels.rollout(_MODEL_CODE[model], x, u.reshape(1, -1), dt, kappa)
    return states[1]


def rollout(x0, controls, dt, kappa, model="omni6"):
    """States (T+1, n_x) from integrating a (T, n_u) control sequence."""
    return kernels.rollout(_MODEL_CODE[model], np.asarray(x0, dtype=float),
                           np.asarray(controls, dtype=float), dt, kappa)


def linearize_dynamics(x, u, dt, kappa, model="omni6"):
    """Analytic Jacobians (d f/d x, d f/d u) of one dynamics step."""
    x = np.asarray(x, dtype=float)
    th = x[2]
    s, c = math.sin(th), math.cos(th)
    if model == "omni6":
        vx, vy = x[3], x[4]
        A = np.eye(6)
        A[0, 2] = dt * (-vx * s - vy * c)
        A[0, 3] = dt * c
        A[0, 4] = -dt * s
        A[1, 2] = dt * (vx * c - vy * s)
        A[1, 3] = dt * s
        A[1, 4] = dt * c
        A[2, 3] = dt * kappa
        A[2, 5] = dt * (1.0 - kappa)
        B = np.zeros((6, 3))
        B[3, 0] = dt
        B[4, 1] = dt
        B[5, 2] = dt
        return A, B
    if model == "diff4":
        vx = x[3]
        A = np.eye(4)
        A[0, 2] = -dt * vx * s
        A[0, 3] = dt * c
        A[1, 2] = dt * vx * c
        A[1, 3] = dt * s
        A[2, 3] = dt * kappa
        B = np.zeros((4, 2))
        B[2, 1] = dt * (1.0 - kappa)
        B[3, 0] = dt
        return A, B
    raise ValueError(f"unknown model {model!r}")
