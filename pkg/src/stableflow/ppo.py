"""From-scratch clipped-surrogate policy-gradient training.

One trainer drives two interchangeable policy parameterizations: the
flow-based controller (mean given by the pullback control law, gradients
through the tape including the Jacobian term) and a plain dense-network
Gaussian policy used as the comparison baseline. Everything else --
rollout collection, generalized advantage estimation, the clipped
surrogate, the value function, and the Adam optimizer -- is shared by
construction.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import flow as flowmod
from .controller import (
    LOG_STD_FLOOR,
    controller_mean,
    gaussian_log_prob,
    make_policy,
    policy_sample,
)
from .dynamics import RewardConfig, rollout
from .errors import DivergenceError, NumericError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    epochs_per_iter: int = 10
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    n_rollouts_per_iter: int = 15
    horizon_steps: int = 200
    max_iters: int = 100
    seed: int = 0
    entropy_coef: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ShapeError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ShapeError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0.0:
            raise ShapeError("clip_epsilon must be positive")


@dataclass
class IterationMetrics:
    """Per-iteration training record.

    ``mean_abs_u`` is the mean Euclidean action norm over the collected
    batch; ``mean_dist`` the mean distance to the goal; ``success_rate``
    comes from deterministic evaluation rollouts on fixed starts.
    """

    iteration: int
    mean_return: float
    success_rate: float
    mean_policy_std: float
    mean_abs_u: float
    mean_dist: float
    wall_time_s: float

    CSV_HEADER = "iteration,mean_return,success_rate,mean_policy_std,mean_abs_u,mean_dist,wall_time_s"

    def csv_row(self):
        return (
            f"{self.iteration},{self.mean_return!r},{self.success_rate!r},"
            f"{self.mean_policy_std!r},{self.mean_abs_u!r},{self.mean_dist!r},"
            f"{self.wall_time_s!r}"
        )


# -- optimizer -----------------------------------------------------------------


class Adam:
    """First-order adaptive-moment optimizer updating arrays in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# -- dense networks ------------------------------------------------------------


def mlp_init(sizes, rng, zero_last=True):
    """Weight list [(w, b), ...]; hidden layers 1/sqrt(fan_in), last zeros."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            w = np.zeros((n_out, n_in))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_out, n_in))
        layers.append((w, np.zeros(n_out)))
    return layers


def mlp_apply(layers, x):
    """tanh MLP; runs on ndarrays or tape tensors."""
    for i, (w, b) in enumerate(layers):
        x = ad.matmul(x, ad.transpose(w)) + b
        if i < len(layers) - 1:
            x = ad.tanh(x)
    return x


# -- policy adapters ------------------------------------------------------------


class FlowPolicy:
    """Trainer-facing wrapper around (PolicyParams, Gains)."""

    kind = "nf"

    def __init__(self, policy, gains):
        self.policy = policy
        self.gains = gains

    @classmethod
    def fresh(cls, dim, n_flow, n_hidden, sigma_init, x_ref, gains, rng):
        return cls(make_policy(dim, n_flow, n_hidden, sigma_init, x_ref, rng), gains)

    @property
    def x_ref(self):
        return self.policy.x_ref

    def act(self, state, stochastic, rng):
        if stochastic:
            return policy_sample(self.policy, self.gains, state, rng)
        return controller_mean(self.policy, self.gains, state), 0.0

    def trainable_arrays(self):
        return self.policy.flow.param_arrays() + [self.policy.log_std]

    def log_prob_node(self, xs, vs, actions):
        """(log-prob tensor [B], leaves, log_std leaf) for a minibatch."""
        mat, leaves = flowmod._materialize(self.policy.flow, lift=True)
        log_std = ad.Tensor(self.policy.log_std)
        mean = flowmod.pullback_control(
            mat, self.gains.S, self.gains.D, xs, vs, self.policy.x_ref[None, :]
        )
        logp = gaussian_log_prob(actions, mean, log_std)
        return logp, leaves + [log_std], log_std

    def post_update(self):
        np.maximum(self.policy.log_std, LOG_STD_FLOOR, out=self.policy.log_std)

    def mean_policy_std(self):
        return float(np.mean(np.exp(self.policy.log_std)))

    def to_dict(self):
        from .controller import policy_to_dict

        return policy_to_dict(self.policy)


class BaselinePolicy:
    """Plain dense-network Gaussian policy (the comparison parameterization)."""

    kind = "baseline"

    def __init__(self, layers, log_std, x_ref):
        self.layers = layers
        self.log_std = np.asarray(log_std, dtype=np.float64)
        self.x_ref = np.asarray(x_ref, dtype=np.float64)

    @classmethod
    def fresh(cls, dim, sigma_init, x_ref, rng, hidden=32):
        layers = mlp_init([2 * dim, hidden, hidden, dim], rng)
        return cls(layers, np.full(dim, np.log(sigma_init)), x_ref)

    def _obs(self, state):
        return np.concatenate([state.x, state.xdot])

    def act(self, state, stochastic, rng):
        mean = mlp_apply(self.layers, self._obs(state)[None, :])[0]
        if not stochastic:
            return mean, 0.0
        action = mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)
        return action, float(gaussian_log_prob(action, mean, self.log_std))

    def trainable_arrays(self):
        arrays = []
        for w, b in self.layers:
            arrays.extend((w, b))
        arrays.append(self.log_std)
        return arrays

    def log_prob_node(self, xs, vs, actions):
        leaves = []
        lifted = []
        for w, b in self.layers:
            tw, tb = ad.Tensor(w), ad.Tensor(b)
            leaves.extend((tw, tb))
            lifted.append((tw, tb))
        log_std = ad.Tensor(self.log_std)
        mean = mlp_apply(lifted, np.concatenate([xs, vs], axis=1))
        logp = gaussian_log_prob(actions, mean, log_std)
        return logp, leaves + [log_std], log_std

    def post_update(self):
        np.maximum(self.log_std, LOG_STD_FLOOR, out=self.log_std)

    def mean_policy_std(self):
        return float(np.mean(np.exp(self.log_std)))

    def to_dict(self):
        return {
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in self.layers],
            "log_std": self.log_std.tolist(),
            "x_ref": self.x_ref.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        layers = [
            (np.asarray(l["w"], float), np.asarray(l["b"], float))
            for l in doc["layers"]
        ]
        return cls(layers, np.asarray(doc["log_std"], float), np.asarray(doc["x_ref"], float))


# -- value function --------------------------------------------------------------


class ValueFunction:
    """2x32 tanh network on [x, xdot] with running target standardization.

    Returns are O(10^2..10^3); the net regresses standardized targets and
    predictions are mapped back, so GAE sees values in return units.
    """

    def __init__(self, dim, rng, hidden=32, momentum=0.2):
        self.layers = mlp_init([2 * dim, hidden, hidden, 1], rng)
        self.shift = 0.0
        self.scale = 1.0
        self._initialized = False
        self.momentum = momentum

    def trainable_arrays(self):
        arrays = []
        for w, b in self.layers:
            arrays.extend((w, b))
        return arrays

    def predict(self, obs):
        """Value estimates in return units; obs of shape [N, 2d]."""
        raw = mlp_apply(self.layers, obs)[:, 0]
        return raw * self.scale + self.shift

    def update_target_stats(self, returns):
        mean = float(np.mean(returns))
        std = float(np.std(returns)) or 1.0
        if not self._initialized:
            self.shift, self.scale = mean, std
            self._initialized = True
        else:
            m = self.momentum
            self.shift = (1 - m) * self.shift + m * mean
            self.scale = (1 - m) * self.scale + m * std

    def loss_node(self, obs, targets):
        leaves = []
        lifted = []
        for w, b in self.layers:
            tw, tb = ad.Tensor(w), ad.Tensor(b)
            leaves.extend((tw, tb))
            lifted.append((tw, tb))
        pred = ad.reshape(mlp_apply(lifted, obs), (obs.shape[0],))
        norm_targets = (targets - self.shift) / self.scale
        err = pred - norm_targets
        return ad.tmean(err * err), leaves


# -- advantage estimation ----------------------------------------------------------


def compute_gae(trajectory, values, gamma, lam):
    """Generalized advantage estimation.

    values has T+1 entries aligned with trajectory.states; returns
    (advantages[T], returns[T] = advantages + values[:T]).
    """
    rewards = np.asarray(trajectory.rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = rewards.shape[0]
    if values.shape != (n + 1,):
        raise ShapeError("values must have one more entry than rewards")
    deltas = rewards + gamma * values[1:] - values[:-1]
    advantages = np.empty(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        advantages[t] = acc
    return advantages, advantages + values[:-1]


def normalize_advantages(advantages):
    """Zero mean, unit std over the batch (the PPO stabilizer)."""
    mean = advantages.mean()
    std = advantages.std()
    if std == 0.0:
        return advantages - mean
    return (advantages - mean) / std


# -- PPO update ---------------------------------------------------------------------


def _batch_from_trajectories(trajectories, value_fn, cfg):
    xs, vs, acts, logps, advs, rets = [], [], [], [], [], []
    for traj in trajectories:
        pos = traj.positions()
        vel = traj.velocities()
        obs = np.concatenate([pos, vel], axis=1)
        values = value_fn.predict(obs)
        adv, ret = compute_gae(traj, values, cfg.gamma, cfg.gae_lambda)
        xs.append(pos[:-1])
        vs.append(vel[:-1])
        acts.append(np.stack(traj.actions))
        logps.append(traj.log_probs)
        advs.append(adv)
        rets.append(ret)
    return (
        np.concatenate(xs),
        np.concatenate(vs),
        np.concatenate(acts),
        np.concatenate(logps),
        normalize_advantages(np.concatenate(advs)),
        np.concatenate(rets),
    )


def ppo_update(policy, value_fn, trajectories, cfg, *, policy_opt, value_opt, rng):
    """One iteration of clipped-surrogate ascent plus value regression.

    Raises NumericError (naming the epoch/minibatch) on a non-finite loss,
    leaving the caller to discard the iteration.
    """
    if not trajectories:
        raise ShapeError("empty trajectory batch")
    xs, vs, acts, logp_old, adv, ret = _batch_from_trajectories(
        trajectories, value_fn, cfg
    )
    value_fn.update_target_stats(ret)
    obs = np.concatenate([xs, vs], axis=1)
    n = xs.shape[0]
    lo, hi = 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon
    stats = {"policy_loss": [], "value_loss": [], "clip_fraction": []}

    for epoch in range(cfg.epochs_per_iter):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = order[start : start + cfg.minibatch_size]
            logp, leaves, log_std = policy.log_prob_node(xs[mb], vs[mb], acts[mb])
            ratio = ad.exp(logp - logp_old[mb])
            surrogate = ad.minimum(ratio * adv[mb], ad.clip(ratio, lo, hi) * adv[mb])
            loss = -ad.tmean(surrogate)
            if cfg.entropy_coef != 0.0:
                entropy = ad.tsum(log_std) + 0.5 * len(policy.x_ref) * (
                    1.0 + np.log(2.0 * np.pi)
                )
                loss = loss - cfg.entropy_coef * entropy
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite policy loss (epoch {epoch}, minibatch at {start})"
                )
            loss.backward()
            policy_opt.step([leaf.grad for leaf in leaves])
            policy.post_update()

            v_loss, v_leaves = value_fn.loss_node(obs[mb], ret[mb])
            if not np.isfinite(v_loss.data):
                raise NumericError(
                    f"non-finite value loss (epoch {epoch}, minibatch at {start})"
                )
            v_loss.backward()
            value_opt.step([leaf.grad for leaf in v_leaves])

            stats["policy_loss"].append(float(loss.data))
            stats["value_loss"].append(float(v_loss.data))
            stats["clip_fraction"].append(
                float(np.mean((ratio.data < lo) | (ratio.data > hi)))
            )
    return {k: float(np.mean(v)) for k, v in stats.items()}


# -- training loop -------------------------------------------------------------------


def make_policy_adapter(
    kind, dim, gains, x_ref, rng, *, n_flow=2, n_hidden=8, sigma_init=2.0
):
    if kind in ("nf", "normalizing-flow", "flow"):
        return FlowPolicy.fresh(dim, n_flow, n_hidden, sigma_init, x_ref, gains, rng)
    if kind == "baseline":
        return BaselinePolicy.fresh(dim, sigma_init, x_ref, rng)
    raise ShapeError(f"unknown policy kind {kind!r}")


def train(
    plant,
    policy_kind,
    cfg,
    reward_cfg,
    gains,
    *,
    n_flow=2,
    n_hidden=8,
    sigma_init=2.0,
    x_ref=None,
    dt_control=0.01,
    n_substeps=10,
    start_sampler=None,
    eval_starts=None,
    n_eval_starts=5,
    on_iteration=None,
):
    """Run the full learning loop; returns (policy adapter, metrics list).

    Per iteration: collect ``n_rollouts_per_iter`` stochastic episodes
    (diverged episodes are discarded and logged), run the PPO update, then
    evaluate the deterministic controller on fixed starts for the success
    rate. ``on_iteration(metrics, policy)`` fires after each iteration.
    """
    if reward_cfg is None:
        reward_cfg = RewardConfig()
    dim = plant.dim
    if x_ref is None:
        x_ref = plant.goal() if hasattr(plant, "goal") else np.zeros(dim)
    x_ref = np.asarray(x_ref, dtype=np.float64)

    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1217]))
    update_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0DD5]))
    eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE7A1]))
    episode_rngs = [
        np.random.default_rng(cfg.seed ^ i) for i in range(cfg.n_rollouts_per_iter)
    ]

    policy = make_policy_adapter(
        policy_kind,
        dim,
        gains,
        x_ref,
        init_rng,
        n_flow=n_flow,
        n_hidden=n_hidden,
        sigma_init=sigma_init,
    )
    value_fn = ValueFunction(dim, init_rng)
    policy_opt = Adam(policy.trainable_arrays(), cfg.learning_rate)
    value_opt = Adam(value_fn.trainable_arrays(), cfg.learning_rate)

    if start_sampler is None:
        if hasattr(plant, "sample_start"):
            start_sampler = plant.sample_start
        else:
            raise ShapeError("plant has no start distribution; pass start_sampler")
    if eval_starts is None:
        eval_starts = [start_sampler(eval_rng) for _ in range(n_eval_starts)]

    horizon = cfg.horizon_steps * dt_control
    metrics = []
    for iteration in range(cfg.max_iters):
        t0 = time.perf_counter()
        batch = []
        for i in range(cfg.n_rollouts_per_iter):
            rng_i = episode_rngs[i]
            try:
                batch.append(
                    rollout(
                        plant,
                        policy,
                        gains,
                        horizon,
                        dt_control,
                        stochastic=True,
                        rng=rng_i,
                        start=start_sampler(rng_i),
                        reward_cfg=reward_cfg,
                        n_substeps=n_substeps,
                    )
                )
            except DivergenceError as err:
                log.warning("iteration %d episode %d diverged: %s", iteration, i, err)

        if batch:
            all_u = np.concatenate([np.stack(t.actions) for t in batch])
            all_x = np.concatenate([t.positions()[:-1] for t in batch])
            mean_return = float(np.mean([t.total_reward() for t in batch]))
            mean_abs_u = float(np.mean(np.linalg.norm(all_u, axis=1)))
            mean_dist = float(np.mean(np.linalg.norm(all_x - x_ref, axis=1)))
            try:
                ppo_update(
                    policy,
                    value_fn,
                    batch,
                    cfg,
                    policy_opt=policy_opt,
                    value_opt=value_opt,
                    rng=update_rng,
                )
            except NumericError as err:
                log.warning("iteration %d update aborted: %s", iteration, err)
        else:
            mean_return = mean_abs_u = mean_dist = float("nan")
            log.warning("iteration %d: every episode diverged", iteration)

        successes = 0
        for start in eval_starts:
            try:
                traj = rollout(
                    plant,
                    policy,
                    gains,
                    horizon,
                    dt_control,
                    stochastic=False,
                    rng=eval_rng,
                    start=start,
                    reward_cfg=reward_cfg,
                    n_substeps=n_substeps,
                )
                successes += bool(traj.success)
            except DivergenceError:
                pass

        record = IterationMetrics(
            iteration=iteration,
            mean_return=mean_return,
            success_rate=successes / len(eval_starts),
            mean_policy_std=policy.mean_policy_std(),
            mean_abs_u=mean_abs_u,
            mean_dist=mean_dist,
            wall_time_s=time.perf_counter() - t0,
        )
        metrics.append(record)
        if on_iteration is not None:
            on_iteration(record, policy)

    return policy, metrics
