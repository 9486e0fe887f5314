"""Rigid-body plants and closed-loop rollouts.

All plants expose the manipulator form  M(x) xddot + C(x, xdot) xdot + g(x)
= u + f_ext  and are integrated with semi-implicit Euler (velocity first,
then position) at a physics substep, with the control held constant over
each control period (zero-order hold).

The block-insertion plant models a square block sliding in a plane toward
a slot cut into a table; walls act through a penalty contact: spring-damper
normal force (clamped non-negative) plus Coulomb friction with a linear
stiction zone. The environment is passive: it can store elastic energy and
dissipate, never inject.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controller import PlantState, controller_mean, policy_sample
from .errors import DivergenceError, NumericError, ShapeError

WORKSPACE_BOUND = 10.0  # m; exceeding it signals exploding control


@dataclass(frozen=True)
class RewardConfig:
    """Weights of the distance + log-distance + effort penalty reward."""

    w_q: float = 1.0
    w_log: float = 1.0
    alpha: float = 1e-5
    w_u: float = 1e-4

    def __post_init__(self):
        if min(self.w_q, self.w_log, self.w_u) < 0 or self.alpha <= 0:
            raise ShapeError("reward weights must be >= 0 and alpha > 0")


def reward_fn(state, u, x_ref, cfg):
    """r = -(w_q d^2 + w_log log(d^2 + alpha) + w_u |u|^2), d = |x - x_ref|."""
    d2 = float(np.sum((state.x - np.asarray(x_ref)) ** 2))
    effort = float(np.sum(np.asarray(u) ** 2))
    return -(cfg.w_q * d2 + cfg.w_log * np.log(d2 + cfg.alpha) + cfg.w_u * effort)


# -- plants -------------------------------------------------------------------


class FreePointMass:
    """Unit point mass with no Coriolis, gravity, or external force."""

    def __init__(self, mass=1.0, dim=2):
        self.mass = float(mass)
        self.dim = dim

    def mass_matrix(self, x):
        return self.mass * np.broadcast_to(np.eye(self.dim), np.shape(x)[:-1] + (self.dim, self.dim))

    def coriolis(self, x, xdot):
        return np.zeros(np.shape(x)[:-1] + (self.dim, self.dim))

    def gravity(self, x):
        return np.zeros_like(np.asarray(x, float))

    def external_force(self, x, xdot):
        return np.zeros_like(np.asarray(x, float))

    def accel(self, x, xdot, u):
        return np.asarray(u, float) / self.mass


class TwoLinkArm:
    """Planar 2R arm, point masses at the link tips, gravity compensated.

    Joint angles are the generalized coordinates; the closed-form M and the
    Christoffel C satisfy the skew-symmetry of (Mdot - 2C) exactly.
    """

    dim = 2

    def __init__(self, m1=0.5, m2=0.5, l1=0.5, l2=0.5):
        self.m1, self.m2, self.l1, self.l2 = float(m1), float(m2), float(l1), float(l2)

    def mass_matrix(self, x):
        x = np.asarray(x, float)
        c2 = np.cos(x[..., 1])
        a = self.m2 * self.l1 * self.l2
        m11 = (self.m1 + self.m2) * self.l1**2 + self.m2 * self.l2**2 + 2 * a * c2
        m12 = self.m2 * self.l2**2 + a * c2
        m22 = self.m2 * self.l2**2 + np.zeros_like(c2)
        return np.stack(
            [np.stack([m11, m12], -1), np.stack([m12, m22], -1)], -2
        )

    def coriolis(self, x, xdot):
        x = np.asarray(x, float)
        xdot = np.asarray(xdot, float)
        h = -self.m2 * self.l1 * self.l2 * np.sin(x[..., 1])
        q1d, q2d = xdot[..., 0], xdot[..., 1]
        zero = np.zeros_like(h)
        return np.stack(
            [
                np.stack([h * q2d, h * (q1d + q2d)], -1),
                np.stack([-h * q1d, zero], -1),
            ],
            -2,
        )

    def gravity(self, x):
        return np.zeros_like(np.asarray(x, float))

    def external_force(self, x, xdot):
        return np.zeros_like(np.asarray(x, float))

    def accel(self, x, xdot, u):
        m = self.mass_matrix(x)
        rhs = u + self.external_force(x, xdot) - np.einsum(
            "...ij,...j->...i", self.coriolis(x, xdot), xdot
        )
        try:
            return np.linalg.solve(m, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as err:
            raise NumericError(f"singular mass matrix at configuration {x}") from err


@dataclass(frozen=True)
class WallBox:
    """Axis-aligned solid rectangle (x_min, x_max, y_min, y_max)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float


class BlockInsertionPlant:
    """Square block sliding in a plane, to be inserted into a tight slot.

    Geometry: a table occupies y <= 0 except for a channel of width
    (block + clearance) around x = 0, which reaches down to a floor at
    y = -slot_depth. The goal is the block resting on the slot floor.
    """

    dim = 2

    def __init__(
        self,
        mass=1.0,
        half_width=0.025,
        clearance=0.002,
        slot_depth=0.030,
        wall_stiffness=1e5,
        wall_damping=300.0,
        friction_coef=0.3,
        stiction_velocity=1e-4,
    ):
        self.mass = float(mass)
        self.half_width = float(half_width)
        self.clearance = float(clearance)
        self.slot_depth = float(slot_depth)
        self.wall_stiffness = float(wall_stiffness)
        self.wall_damping = float(wall_damping)
        self.friction_coef = float(friction_coef)
        self.stiction_velocity = float(stiction_velocity)
        half_channel = self.half_width + self.clearance / 2.0
        ext = WORKSPACE_BOUND
        depth = self.slot_depth
        self.walls = (
            WallBox(-ext, -half_channel, -2 * depth, 0.0),
            WallBox(half_channel, ext, -2 * depth, 0.0),
            WallBox(-ext, ext, -2 * depth, -depth),
        )

    def goal(self):
        """Block center when resting on the slot floor."""
        return np.array([0.0, self.half_width - self.slot_depth])

    def mass_matrix(self, x):
        return self.mass * np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2))

    def coriolis(self, x, xdot):
        return np.zeros(np.shape(x)[:-1] + (2, 2))

    def gravity(self, x):
        return np.zeros_like(np.asarray(x, float))

    def _contacts(self, x, xdot):
        """Per-wall (normal_axis, direction, overlap, normal_force)."""
        px, py = float(x[0]), float(x[1])
        b_lo = (px - self.half_width, py - self.half_width)
        b_hi = (px + self.half_width, py + self.half_width)
        out = []
        for wall in self.walls:
            ox = min(b_hi[0], wall.x_max) - max(b_lo[0], wall.x_min)
            oy = min(b_hi[1], wall.y_max) - max(b_lo[1], wall.y_min)
            if ox <= 0.0 or oy <= 0.0:
                continue
            axis = 0 if ox < oy else 1
            overlap = ox if axis == 0 else oy
            center = (
                (wall.x_min + wall.x_max) / 2.0,
                (wall.y_min + wall.y_max) / 2.0,
            )
            direction = 1.0 if (px, py)[axis] >= center[axis] else -1.0
            # penetration grows when the block moves against the outward normal
            pen_rate = -direction * float(xdot[axis])
            f_n = self.wall_stiffness * overlap + self.wall_damping * pen_rate
            out.append((axis, direction, overlap, max(f_n, 0.0)))
        return out

    def external_force(self, x, xdot):
        f = np.zeros(2)
        for axis, direction, _overlap, f_n in self._contacts(x, xdot):
            f[axis] += direction * f_n
            tangent = 1 - axis
            v_t = float(xdot[tangent])
            scale = (
                np.sign(v_t)
                if abs(v_t) > self.stiction_velocity
                else v_t / self.stiction_velocity
            )
            f[tangent] -= self.friction_coef * f_n * scale
        return f

    def elastic_energy(self, state):
        """Recoverable energy stored in the penalty springs (J)."""
        total = 0.0
        for _axis, _direction, overlap, _f_n in self._contacts(state.x, state.xdot):
            total += 0.5 * self.wall_stiffness * overlap**2
        return total

    def insertion_depth(self, state):
        """How far the block bottom sits below the table surface (m)."""
        if abs(float(state.x[0])) > self.clearance:
            return 0.0
        return max(0.0, -(float(state.x[1]) - self.half_width))

    def is_success(self, state):
        return self.insertion_depth(state) >= 0.025

    def accel(self, x, xdot, u):
        return (np.asarray(u, float) + self.external_force(x, xdot)) / self.mass

    def sample_start(self, rng, nominal=(0.0, 0.12), std=(0.05, 0.10)):
        """Start above the slot; resampled until clear of the table solids."""
        nominal = np.asarray(nominal, float)
        std = np.asarray(std, float)
        for _ in range(1000):
            x0 = nominal + std * rng.standard_normal(2)
            if (
                x0[1] >= self.half_width + 0.005
                and abs(x0[0]) <= 0.4
                and x0[1] <= 0.5
            ):
                return PlantState(x0, np.zeros(2))
        raise NumericError("start sampling failed to clear the workspace")


# -- integration ---------------------------------------------------------------


def _generic_accel(plant, x, xdot, u):
    m = plant.mass_matrix(x)
    rhs = (
        np.asarray(u, float)
        + plant.external_force(x, xdot)
        - np.einsum("...ij,...j->...i", plant.coriolis(x, xdot), xdot)
        - plant.gravity(x)
    )
    try:
        return np.linalg.solve(m, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as err:
        raise NumericError(f"singular mass matrix at configuration {x}") from err


def _substeps(plant, x, v, u, h, n, accumulate_work=False):
    """Semi-implicit Euler substeps under zero-order-hold control.

    Returns (x, v, external-force work) with the work accumulated by the
    kinetic-energy-consistent midpoint rule  f·(v_n + v_{n+1})/2 · h.
    """
    accel = getattr(plant, "accel", None)
    work = 0.0
    for _ in range(n):
        f_ext = plant.external_force(x, v)
        if accel is not None:
            a = accel(x, v, u)
        else:
            a = _generic_accel(plant, x, v, u)
        v_new = v + h * a
        if accumulate_work:
            work += h * float(f_ext @ (v + v_new)) / 2.0
        v = v_new
        x = x + h * v
    return x, v, work


def step(plant, state, u, dt_control, n_substeps=10):
    """Advance one control period; u is held constant across substeps."""
    if dt_control <= 0:
        raise ShapeError("dt_control must be positive")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != state.x.shape:
        raise ShapeError("control dimension does not match the plant state")
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite control input")
    h = dt_control / n_substeps
    x, v, _ = _substeps(plant, state.x, state.xdot, u, h, n_substeps)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise DivergenceError("state became non-finite", state=(x, v))
    return PlantState(x, v)


def block_contact_force(plant, state):
    """Penalty contact force on the block at the given state (N)."""
    return plant.external_force(state.x, state.xdot)


# -- trajectories ---------------------------------------------------------------


@dataclass
class Trajectory:
    """One closed-loop episode at control-period resolution.

    ``states`` has T+1 entries, the per-step sequences have T. ``ext_work``
    is the external-force work integral accumulated at substep resolution
    (cumulative, T+1 entries), used by the passivity audit.
    """

    times: np.ndarray
    states: list
    actions: list
    rewards: np.ndarray
    log_probs: np.ndarray
    f_ext_trace: list
    success: bool
    ext_work: np.ndarray

    def positions(self):
        return np.stack([s.x for s in self.states])

    def velocities(self):
        return np.stack([s.xdot for s in self.states])

    def total_reward(self):
        return float(np.sum(self.rewards))

    def step_records(self):
        """JSON-ready per-step records: {t, x, xdot, u, r, logp, fext}."""
        for k in range(len(self.actions)):
            yield {
                "t": float(self.times[k]),
                "x": self.states[k].x.tolist(),
                "xdot": self.states[k].xdot.tolist(),
                "u": np.asarray(self.actions[k]).tolist(),
                "r": float(self.rewards[k]),
                "logp": float(self.log_probs[k]),
                "fext": np.asarray(self.f_ext_trace[k]).tolist(),
            }


def rollout(
    plant,
    policy,
    gains,
    horizon,
    dt_control,
    stochastic,
    rng,
    *,
    start=None,
    reward_cfg=None,
    n_substeps=10,
):
    """Closed-loop episode; deterministic mode uses the controller mean.

    ``policy`` is a PolicyParams (flow policy) or any object providing
    ``act(state, stochastic, rng) -> (u, log_prob)`` and ``x_ref``.
    """
    n_steps_f = horizon / dt_control
    n_steps = int(round(n_steps_f))
    if abs(n_steps_f - n_steps) > 1e-9 or n_steps <= 0:
        raise ShapeError("horizon must be an integral number of control periods")
    if reward_cfg is None:
        reward_cfg = RewardConfig()

    if hasattr(policy, "act"):
        act = policy.act
        x_ref = policy.x_ref
    else:
        def act(state, stoch, rng_):
            if stoch:
                return policy_sample(policy, gains, state, rng_)
            return controller_mean(policy, gains, state), 0.0

        x_ref = policy.x_ref

    if start is None:
        if hasattr(plant, "sample_start"):
            start = plant.sample_start(rng)
        else:
            start = PlantState(np.zeros(plant.dim), np.zeros(plant.dim))

    state = start
    h = dt_control / n_substeps
    states = [state]
    actions, f_trace = [], []
    rewards = np.zeros(n_steps)
    log_probs = np.zeros(n_steps)
    ext_work = np.zeros(n_steps + 1)
    success = bool(getattr(plant, "is_success", lambda s: False)(state))

    for k in range(n_steps):
        u, logp = act(state, stochastic, rng)
        u = np.asarray(u, dtype=np.float64)
        f_trace.append(plant.external_force(state.x, state.xdot))
        rewards[k] = reward_fn(state, u, x_ref, reward_cfg)
        log_probs[k] = logp
        x, v, w = _substeps(
            plant, state.x, state.xdot, u, h, n_substeps, accumulate_work=True
        )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise DivergenceError("state became non-finite", step=k, state=(x, v))
        if np.max(np.abs(x)) > WORKSPACE_BOUND:
            raise DivergenceError(
                f"state left the {WORKSPACE_BOUND} m workspace", step=k, state=(x, v)
            )
        state = PlantState(x, v)
        states.append(state)
        actions.append(u)
        ext_work[k + 1] = ext_work[k] + w
        if getattr(plant, "is_success", lambda s: False)(state):
            success = True

    return Trajectory(
        times=np.arange(n_steps + 1) * dt_control,
        states=states,
        actions=actions,
        rewards=rewards,
        log_probs=log_probs,
        f_ext_trace=f_trace,
        success=success,
        ext_work=ext_work,
    )
