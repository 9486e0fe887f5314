"""The pullback spring-damper control law and its stochastic wrapper.

In the transformed coordinates y = phi(x) a plain spring-damper regulator
acts toward y_ref = phi(x_ref); mapping its force back through J^T gives

    u = -J(x)^T S [phi(x) - phi(x_ref)] - J(x)^T D J(x) xdot.

The associated energy ½ dy^T S dy + ½ xdot^T M xdot decreases along the
closed loop for any positive definite S, D, which is what the verifier
module certifies numerically. For learning, the deterministic law becomes
a diagonal-Gaussian policy by adding action noise with trainable
log-standard-deviations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as flowmod
from .errors import NumericError, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))

# floor on log-noise during training; avoids degenerate likelihoods
LOG_STD_FLOOR = float(np.log(1e-3))


def _check_spd(name, m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be a square matrix")
    if not np.allclose(m, m.T, atol=1e-10):
        raise ShapeError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(m).min() <= 0.0:
        raise ShapeError(f"{name} must be positive definite")
    return m


@dataclass(frozen=True)
class Gains:
    """Stiffness S (N/m) and damping D (N·s/m); both symmetric PD."""

    S: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "S", _check_spd("S", self.S))
        object.__setattr__(self, "D", _check_spd("D", self.D))
        if self.S.shape != self.D.shape:
            raise ShapeError("S and D must have the same shape")

    @classmethod
    def identity(cls, dim, s_scale=1.0, d_scale=1.0):
        return cls(s_scale * np.eye(dim), d_scale * np.eye(dim))


@dataclass(frozen=True)
class PlantState:
    """Generalized position x (m) and velocity xdot (m/s)."""

    x: np.ndarray
    xdot: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        xdot = np.asarray(self.xdot, dtype=np.float64)
        if x.shape != xdot.shape or x.ndim != 1:
            raise ShapeError("x and xdot must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xdot))):
            raise NumericError("plant state has non-finite components")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xdot", xdot)

    @property
    def dim(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class PolicyParams:
    """Flow weights, per-dimension log action noise, and the fixed goal."""

    flow: flowmod.FlowParams
    log_std: np.ndarray
    x_ref: np.ndarray

    def __post_init__(self):
        log_std = np.asarray(self.log_std, dtype=np.float64)
        x_ref = np.asarray(self.x_ref, dtype=np.float64)
        d = self.flow.dim
        if log_std.shape != (d,) or x_ref.shape != (d,):
            raise ShapeError("log_std and x_ref must be length-dim vectors")
        if not np.all(np.isfinite(log_std)):
            raise ShapeError("log_std must be finite")
        object.__setattr__(self, "log_std", log_std)
        object.__setattr__(self, "x_ref", x_ref)

    @property
    def dim(self):
        return self.flow.dim


def make_policy(dim, n_flow, n_hidden, sigma_init, x_ref, rng=None, init_std=0.1):
    """Fresh policy: random (or identity when rng is None) flow, spherical noise."""
    if rng is None:
        fl = flowmod.identity_flow(dim, n_flow, n_hidden)
    else:
        fl = flowmod.random_flow(dim, n_flow, n_hidden, rng, init_std)
    return PolicyParams(fl, np.full(dim, np.log(sigma_init)), np.asarray(x_ref, float))


# -- deterministic controller ----------------------------------------------


def controller_mean_batch(policy, gains, x, xdot):
    """Control force for a batch of states; x, xdot of shape [..., d]."""
    mat = flowmod._materialize(policy.flow)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xdot = np.atleast_2d(np.asarray(xdot, dtype=np.float64))
    u = flowmod.pullback_control(
        mat, gains.S, gains.D, x, xdot, np.atleast_2d(policy.x_ref)
    )
    if not np.all(np.isfinite(u)):
        raise NumericError("controller produced a non-finite force")
    return u


def controller_mean(policy, gains, state):
    """u = -J^T S (phi(x)-phi(x_ref)) - J^T D J xdot at one state."""
    return controller_mean_batch(policy, gains, state.x, state.xdot)[0]


def lyapunov_potential_batch(policy, gains, x):
    """½ (phi(x)-phi(x_ref))^T S (phi(x)-phi(x_ref)) for x of shape [..., d]."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dy = flowmod.flow_forward(policy.flow, x) - flowmod.flow_forward(
        policy.flow, np.atleast_2d(policy.x_ref)
    )
    return 0.5 * np.einsum("...i,ij,...j->...", dy, gains.S, dy)


def lyapunov_potential(policy, gains, x):
    """Potential part of the energy function (the zero-velocity slice)."""
    return float(lyapunov_potential_batch(policy, gains, x)[0])


def lyapunov_total(policy, gains, state, mass):
    """Potential plus kinetic energy ½ xdot^T M xdot (J)."""
    mass = np.asarray(mass, dtype=np.float64)
    kinetic = 0.5 * state.xdot @ mass @ state.xdot
    return lyapunov_potential(policy, gains, state.x) + float(kinetic)


# -- stochastic policy -------------------------------------------------------


def gaussian_log_prob(action, mean, log_std):
    """Diagonal-Gaussian log density; works on arrays and tape tensors."""
    z = (action - mean) * ad.exp(-log_std)
    return (
        -0.5 * ad.tsum(z * z, axis=-1)
        - ad.tsum(log_std)
        - 0.5 * LOG_2PI * np.shape(action)[-1]
    )


def policy_sample(policy, gains, state, rng):
    """Draw action = mean + exp(log_std)·z and return its log density."""
    mean = controller_mean(policy, gains, state)
    noise = rng.standard_normal(policy.dim)
    action = mean + np.exp(policy.log_std) * noise
    return action, float(gaussian_log_prob(action, mean, policy.log_std))


def policy_log_prob(policy, gains, state, action):
    mean = controller_mean(policy, gains, state)
    return float(gaussian_log_prob(np.asarray(action, float), mean, policy.log_std))


def policy_log_prob_grad(policy, gains, state, action):
    """Exact gradient of the log density w.r.t. flow weights ⊕ log_std.

    The mean's parameter dependence (including the Jacobian term) flows
    through the tape; returns a flat vector of length P + dim.
    """
    action = np.asarray(action, dtype=np.float64)
    mat, leaves = flowmod._materialize(policy.flow, lift=True)
    log_std = ad.Tensor(policy.log_std)
    mean = flowmod.pullback_control(
        mat,
        gains.S,
        gains.D,
        state.x[None, :],
        state.xdot[None, :],
        policy.x_ref[None, :],
    )
    logp = gaussian_log_prob(action[None, :], mean, log_std)
    logp.backward()
    flow_grad = np.concatenate([leaf.grad.ravel() for leaf in leaves])
    return np.concatenate([flow_grad, log_std.grad])


# -- serialization ------------------------------------------------------------


def policy_to_dict(policy):
    return {
        "flow": flowmod.flow_to_dict(policy.flow),
        "log_std": policy.log_std.tolist(),
        "x_ref": policy.x_ref.tolist(),
    }


def policy_from_dict(doc):
    return PolicyParams(
        flowmod.flow_from_dict(doc["flow"]),
        np.asarray(doc["log_std"], dtype=np.float64),
        np.asarray(doc["x_ref"], dtype=np.float64),
    )


def gains_to_dict(gains):
    return {"S": gains.S.tolist(), "D": gains.D.tolist()}


def gains_from_dict(doc):
    return Gains(np.asarray(doc["S"], float), np.asarray(doc["D"], float))
