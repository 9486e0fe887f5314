"""Numerical certification of the controller's stability properties.

Each verifier rolls out the deterministic controller and measures a
property the theory promises exactly in continuous time: monotone energy
decrease without external forces, convergence to the goal, the passivity
inequality under contact forces, skew-symmetry of (Mdot - 2C), and full
rank of the bijection's Jacobian. Discrete integration gets an explicit,
documented slack; everything else is asserted at face value and reported
with the worst measured violation and a witness state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controller import PlantState, make_policy
from .dynamics import rollout
from .errors import DivergenceError, ShapeError
from .flow import (
    _materialize,
    flow_jacobian,
    materialize_stacked,
    pullback_control,
    stack_apply,
)

# energy slack per control step, calibrated for a 1e-4 s physics substep
EPS_INT = 1e-6

# verification closes the loop at 1 kHz: the decrease statement is
# continuous-time, and a 100 Hz zero-order hold alone adds energy blips
# above the integration slack on the arm
VERIFY_DT_CONTROL = 1e-3
VERIFY_N_SUBSTEPS = 10


@dataclass
class VerificationReport:
    """Outcome of one property check; passed iff worst <= tolerance."""

    property_name: str
    passed: bool
    worst_violation: float
    tolerance: float
    units: str
    witness: dict = field(default_factory=dict)
    n_cases: int = 0

    def to_dict(self):
        return {
            "property": self.property_name,
            "pass": self.passed,
            "worst_violation": self.worst_violation,
            "tolerance": self.tolerance,
            "units": self.units,
            "witness": self.witness,
            "n_cases": self.n_cases,
        }


def _fail_report(name, units, witness, n_cases):
    return VerificationReport(
        property_name=name,
        passed=False,
        worst_violation=float("inf"),
        tolerance=0.0,
        units=units,
        witness=witness,
        n_cases=n_cases,
    )


def merge_reports(reports):
    """Combine same-property reports: worst violation wins, pass = all pass."""
    if not reports:
        raise ShapeError("nothing to merge")
    worst = max(reports, key=lambda r: r.worst_violation)
    return VerificationReport(
        property_name=worst.property_name,
        passed=all(r.passed for r in reports),
        worst_violation=worst.worst_violation,
        tolerance=worst.tolerance,
        units=worst.units,
        witness=worst.witness,
        n_cases=sum(r.n_cases for r in reports),
    )


def _stack_starts(starts):
    xs = np.stack([s.x for s in starts])
    vs = np.stack([s.xdot for s in starts])
    return xs, vs


class _ClosedLoop:
    """Deterministic pullback control over arbitrary leading batch axes.

    ``mat`` is a single materialized flow (inputs [B, d]) or a stacked one
    from `materialize_stacked` (inputs [F, B, d]); the goal transform is
    cached once.
    """

    def __init__(self, plant, mat, gains, x_ref):
        self.plant = plant
        self.mat = mat
        self.S = np.asarray(gains.S, float)
        self.D = np.asarray(gains.D, float)
        self.x_ref = np.asarray(x_ref, float)
        ref = np.atleast_2d(self.x_ref)
        w1 = mat[0][3][0]
        if w1.ndim == 4:  # stacked flows: replicate the goal per flow
            ref = np.broadcast_to(ref, (w1.shape[0],) + ref.shape).copy()
        self.y_ref, _ = stack_apply(mat, ref)

    def control(self, xs, vs):
        return pullback_control(
            self.mat, self.S, self.D, xs, vs, self.x_ref, y_ref=self.y_ref
        )

    def energy(self, xs, vs):
        y, _ = stack_apply(self.mat, xs)
        dy = y - self.y_ref
        potential = 0.5 * np.einsum("...i,ij,...j->...", dy, self.S, dy)
        kinetic = 0.5 * np.einsum(
            "...i,...ij,...j->...", vs, self.plant.mass_matrix(xs), vs
        )
        return potential + kinetic

    def simulate(self, xs, vs, horizon, dt_control, n_substeps):
        """Returns (pos, vel, energy) time-major arrays, or raises."""
        n_steps = int(round(horizon / dt_control))
        h = dt_control / n_substeps
        pos = np.empty((n_steps + 1,) + xs.shape)
        vel = np.empty_like(pos)
        energy = np.empty((n_steps + 1,) + xs.shape[:-1])
        pos[0], vel[0] = xs, vs
        energy[0] = self.energy(xs, vs)
        for k in range(n_steps):
            u = self.control(xs, vs)
            for _ in range(n_substeps):
                vs = vs + h * self.plant.accel(xs, vs, u)
                xs = xs + h * vs
            if not np.all(np.isfinite(xs)) or np.max(np.abs(xs)) > 50.0:
                raise DivergenceError("closed loop diverged", step=k)
            pos[k + 1], vel[k + 1] = xs, vs
            energy[k + 1] = self.energy(xs, vs)
        return pos, vel, energy


def _decrease_report(pos, vel, energy, eps_int, n_cases):
    jumps = np.diff(energy, axis=0)
    idx = np.unravel_index(np.argmax(jumps), jumps.shape)
    worst = float(jumps[idx])
    k = idx[0]
    return VerificationReport(
        property_name="lyapunov_decrease",
        passed=worst <= eps_int,
        worst_violation=worst,
        tolerance=eps_int,
        units="J per control step",
        witness={
            "case_index": [int(i) for i in idx[1:]],
            "step": int(k),
            "x": pos[(k,) + idx[1:]].tolist(),
            "xdot": vel[(k,) + idx[1:]].tolist(),
        },
        n_cases=n_cases,
    )


def _convergence_report(pos, vel, x_ref, delta_pos, delta_vel, n_cases):
    pos_err = np.linalg.norm(pos[-1] - x_ref, axis=-1)
    vel_err = np.linalg.norm(vel[-1], axis=-1)
    ratios = np.maximum(pos_err / delta_pos, vel_err / delta_vel)
    idx = np.unravel_index(np.argmax(ratios), ratios.shape)
    return VerificationReport(
        property_name="convergence",
        passed=float(ratios[idx]) <= 1.0,
        worst_violation=float(ratios[idx]),
        tolerance=1.0,
        units="ratio of final error to threshold",
        witness={
            "case_index": [int(i) for i in idx],
            "final_x": pos[(-1,) + idx].tolist(),
            "final_xdot": vel[(-1,) + idx].tolist(),
        },
        n_cases=n_cases,
    )


def verify_lyapunov_decrease(
    plant,
    policy,
    gains,
    starts,
    horizon,
    *,
    dt_control=VERIFY_DT_CONTROL,
    n_substeps=VERIFY_N_SUBSTEPS,
    eps_int=EPS_INT,
):
    """Check V(t_{k+1}) <= V(t_k) + eps_int along every trajectory.

    The plant must be free of external forces (the decrease statement
    holds for f_ext = 0); eps_int absorbs integration error only.
    """
    xs, vs = _stack_starts(starts)
    loop = _ClosedLoop(plant, _materialize(policy.flow), gains, policy.x_ref)
    try:
        pos, vel, energy = loop.simulate(xs, vs, horizon, dt_control, n_substeps)
    except DivergenceError as err:
        return _fail_report(
            "lyapunov_decrease", "J", {"diverged_at_step": err.step}, len(starts)
        )
    return _decrease_report(pos, vel, energy, eps_int, len(starts))


def verify_convergence(
    plant,
    policy,
    gains,
    starts,
    horizon=30.0,
    *,
    delta_pos=1e-3,
    delta_vel=1e-3,
    dt_control=0.01,
    n_substeps=10,
):
    """Check |x(T) - x_ref| < delta_pos and |xdot(T)| < delta_vel."""
    xs, vs = _stack_starts(starts)
    loop = _ClosedLoop(plant, _materialize(policy.flow), gains, policy.x_ref)
    try:
        pos, vel, _ = loop.simulate(xs, vs, horizon, dt_control, n_substeps)
    except DivergenceError as err:
        return _fail_report(
            "convergence", "ratio", {"diverged_at_step": err.step}, len(starts)
        )
    return _convergence_report(pos, vel, policy.x_ref, delta_pos, delta_vel, len(starts))


def sweep_stability(
    plant,
    policies,
    gains,
    starts,
    *,
    horizon_decrease=3.0,
    horizon_converge=30.0,
    eps_int=EPS_INT,
    delta_pos=1e-3,
    delta_vel=1e-3,
):
    """Decrease + convergence over many flows at once (stacked weights).

    ``starts`` is one list of PlantStates per policy; all flows must share
    an architecture. Returns (decrease report, convergence report).
    """
    x_ref = policies[0].x_ref
    mat = materialize_stacked([p.flow for p in policies])
    xs = np.stack([np.stack([s.x for s in row]) for row in starts])
    vs = np.stack([np.stack([s.xdot for s in row]) for row in starts])
    n_cases = xs.shape[0] * xs.shape[1]
    loop = _ClosedLoop(plant, mat, gains, x_ref)
    try:
        pos, vel, energy = loop.simulate(
            xs, vs, horizon_decrease, VERIFY_DT_CONTROL, VERIFY_N_SUBSTEPS
        )
        dec = _decrease_report(pos, vel, energy, eps_int, n_cases)
        pos, vel, _ = loop.simulate(xs, vs, horizon_converge, 0.01, 10)
        conv = _convergence_report(pos, vel, x_ref, delta_pos, delta_vel, n_cases)
    except DivergenceError as err:
        fail = _fail_report(
            "stability_sweep", "J", {"diverged_at_step": err.step}, n_cases
        )
        return fail, fail
    return dec, conv


def verify_passivity(
    plant,
    policy,
    gains,
    starts,
    horizon,
    *,
    dt_control=0.01,
    n_substeps=100,
    eps_int=EPS_INT,
    rng=None,
):
    """Check V(t) - V(0) <= integral of xdot . f_ext + k*eps_int under contact.

    Uses the work integral accumulated at substep resolution during the
    rollout; stiff penalty contact is badly undersampled at control rate.
    """
    name = "passivity"
    if rng is None:
        rng = np.random.default_rng(0)
    loop = _ClosedLoop(plant, _materialize(policy.flow), gains, policy.x_ref)
    worst = -np.inf
    witness = {}
    for idx, start in enumerate(starts):
        try:
            traj = rollout(
                plant,
                policy,
                gains,
                horizon,
                dt_control,
                stochastic=False,
                rng=rng,
                start=start,
                n_substeps=n_substeps,
            )
        except DivergenceError as err:
            return _fail_report(
                name, "J", {"start_index": idx, "diverged_at_step": err.step}, len(starts)
            )
        xs = traj.positions()
        vs = traj.velocities()
        energy = loop.energy(xs, vs)
        steps = np.arange(1, energy.shape[0])
        margin = energy[1:] - energy[0] - traj.ext_work[1:] - eps_int * steps
        k = int(np.argmax(margin))
        if margin[k] > worst:
            worst = float(margin[k])
            witness = {
                "start_index": idx,
                "step": k + 1,
                "x": xs[k + 1].tolist(),
                "xdot": vs[k + 1].tolist(),
            }
    return VerificationReport(
        property_name=name,
        passed=worst <= 0.0,
        worst_violation=worst,
        tolerance=0.0,
        units="J beyond injected work plus slack",
        witness=witness,
        n_cases=len(starts),
    )


def verify_skew_symmetry(plant, trajectory, tol=1e-6):
    """Check |xdot^T (Mdot_fd - 2C) xdot| <= tol*(1 + |xdot|^2) per step.

    Mdot is taken by central differences over the trajectory's own samples,
    so the trajectory should be recorded at the physics rate.
    """
    name = "skew_symmetry"
    xs = trajectory.positions()
    vs = trajectory.velocities()
    dt = float(trajectory.times[1] - trajectory.times[0])
    m = plant.mass_matrix(xs)
    m_dot = (m[2:] - m[:-2]) / (2.0 * dt)
    c = plant.coriolis(xs[1:-1], vs[1:-1])
    n = m_dot - 2.0 * c
    v_mid = vs[1:-1]
    quad = np.abs(np.einsum("ki,kij,kj->k", v_mid, n, v_mid))
    scale = 1.0 + np.sum(v_mid * v_mid, axis=1)
    ratios = quad / scale
    k = int(np.argmax(ratios))
    return VerificationReport(
        property_name=name,
        passed=float(ratios[k]) <= tol,
        worst_violation=float(ratios[k]),
        tolerance=tol,
        units="normalized power (W per (1+|xdot|^2))",
        witness={"step": k + 1, "x": xs[k + 1].tolist(), "xdot": v_mid[k].tolist()},
        n_cases=len(v_mid),
    )


def verify_jacobian_rank(policy, window, resolution=21, min_singular=1e-8):
    """Check the bijection's Jacobian keeps full rank over a position grid."""
    name = "jacobian_full_rank"
    xs_grid, ys_grid = _window_axes(window, resolution)
    gx, gy = np.meshgrid(xs_grid, ys_grid)
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    jac = flow_jacobian(policy.flow, points)
    sv = np.linalg.svd(jac, compute_uv=False)[:, -1]
    i = int(np.argmin(sv))
    return VerificationReport(
        property_name=name,
        passed=float(sv[i]) > min_singular,
        worst_violation=float(min_singular - sv[i]),
        tolerance=0.0,
        units="1e-8 threshold minus the smallest singular value",
        witness={"x": points[i].tolist(), "min_singular_value": float(sv[i])},
        n_cases=points.shape[0],
    )


def verify_structure(plant, trajectory, policy, window=(-1.5, 1.5, -1.5, 1.5)):
    """Structural checks backing the decrease proof; returns two reports."""
    return [
        verify_skew_symmetry(plant, trajectory),
        verify_jacobian_rank(policy, window),
    ]


# -- energy grid ------------------------------------------------------------------


def _window_axes(window, resolution):
    x_min, x_max, y_min, y_max = window
    return np.linspace(x_min, x_max, resolution), np.linspace(y_min, y_max, resolution)


def energy_grid(policy, gains, window, resolution=101):
    """Zero-velocity energy sampled on a planar lattice.

    Returns (x_coords, y_coords, grid) with grid[i, j] the energy at
    (x_coords[j], y_coords[i]). Planar tasks only.
    """
    if policy.dim != 2:
        raise ShapeError("energy grid export is defined for 2-D tasks only")
    xs_grid, ys_grid = _window_axes(window, resolution)
    gx, gy = np.meshgrid(xs_grid, ys_grid)
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    values = lyapunov_potential_batch(policy, gains, points)
    return xs_grid, ys_grid, values.reshape(resolution, resolution)


# -- sweep helpers ------------------------------------------------------------------


def random_policies(n, dim, x_ref, *, n_flow=2, n_hidden=8, seed_base=0):
    """Randomly initialized flow policies with seeds seed_base..seed_base+n-1."""
    return [
        make_policy(dim, n_flow, n_hidden, 1.0, x_ref, np.random.default_rng(seed))
        for seed in range(seed_base, seed_base + n)
    ]


def point_mass_starts(n, dim, rng, pos_scale=1.0, vel_scale=0.5):
    return [
        PlantState(
            rng.uniform(-pos_scale, pos_scale, dim),
            rng.uniform(-vel_scale, vel_scale, dim),
        )
        for _ in range(n)
    ]
