"""Learning procedures: QAM and its variants plus the flow-policy baselines.

Every agent consumes a :class:`~qam.data.Batch` per call to :meth:`update` and
returns a flat dict of float metrics.  All components take one gradient step
per batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .adjoint import am_loss, bam_loss, basic_adjoint, boundary_adjoint, lean_adjoint
from .critic import AnalyticCritic, CriticEnsemble
from .flow import TimeGrid, VelocityField, fm_loss, ode_sample, ode_sample_recorded, sde_sample
from .nn import ParameterSet, Trainable, init_mlp, mlp_apply, mlp_forward

KINDS = ("qam", "qam-fql", "qam-edit", "bam", "fql", "fbrac", "fawac", "cgql")


@dataclass
class AgentConfig:
    kind: str = "qam"
    state_dim: int = 1
    action_dim: int = 2
    hidden: tuple = (64, 64)
    activation: str = "gelu"
    T: int = 10
    tau: float = 1.0
    gamma: float = 0.99
    rho: float = 0.5
    K: int = 10
    ema_rate: float = 5e-3
    lr: float = 3e-4
    actor_grad_clip: float | None = 1.0
    boundary_clip: bool = True
    std_mode: str = "sum"
    alpha: float = 10.0
    sigma_a: float = 0.1
    guidance: float = 0.1
    action_bound: float | None = 1.0
    init_theta_from_beta: bool = True
    beta_lr: float | None = None
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        self.hidden = tuple(self.hidden)


def _clip(a, bound):
    return a if bound is None else np.clip(a, -bound, bound)


def _add(a: ParameterSet, b: ParameterSet, scale=1.0) -> ParameterSet:
    return a.with_arrays([x + scale * y for x, y in zip(a.arrays(), b.arrays())])


class Agent:
    """Shared plumbing: behavior flow ``f_beta``, critic, TD step, checkpoint nets."""

    uses_beta = True

    def __init__(self, config: AgentConfig, rng: np.random.Generator, critic=None):
        self.config = c = config
        self.grid = TimeGrid(c.T)
        S, A = c.state_dim, c.action_dim
        beta_lr = c.lr if c.beta_lr is None else c.beta_lr
        self.beta = Trainable(init_mlp(rng, S + A + 1, A, c.hidden, c.activation), beta_lr)
        if critic is None:
            critic = CriticEnsemble.init(rng, S, A, c.K, c.hidden, c.activation, rho=c.rho,
                                         ema_rate=c.ema_rate, lr=c.lr, std_mode=c.std_mode)
        self.critic = critic
        self.steps = 0
        self._build(rng)

    def _build(self, rng):
        pass

    # -- fields ----------------------------------------------------------------

    def _field(self, trainable, role):
        c = self.config
        return VelocityField(trainable.params, c.state_dim, c.action_dim, role)

    @property
    def f_beta(self) -> VelocityField:
        return self._field(self.beta, "behavior_beta")

    # -- acting ----------------------------------------------------------------

    def _noise(self, rng, n, deterministic):
        A = self.config.action_dim
        return np.zeros((n, A)) if deterministic else rng.standard_normal((n, A))

    def policy_actions(self, s, rng, deterministic=False):
        """Actions of the acting policy, one per row of ``s``."""
        raise NotImplementedError

    def backup_actions(self, s_next, rng):
        return self.policy_actions(s_next, rng)

    def act(self, s, rng, deterministic=False):
        s = np.asarray(s, dtype=np.float64)
        single = s.ndim == 1
        a = self.policy_actions(np.atleast_2d(s), rng, deterministic)
        return a[0] if single else a

    # -- critic ----------------------------------------------------------------

    def critic_step(self, batch, rng, metrics):
        if not getattr(self.critic, "trainable", False):
            return None
        a_next = _clip(self.backup_actions(batch.s_next, rng), self.config.action_bound)
        target = self.critic.pessimistic_target(batch.s_next, a_next, batch.r, batch.done,
                                                self.config.gamma)
        loss, grads = self.critic.td_loss(batch.s, batch.a, target)
        infos = self.critic.apply_gradients(grads)
        metrics["critic_loss"] = loss
        metrics["critic_grad_norm"] = float(np.mean([i["grad_norm"] for i in infos]))
        return target

    def finish_step(self):
        if getattr(self.critic, "trainable", False):
            self.critic.update_targets()
        self.steps += 1

    def behavior_step(self, batch, rng, metrics):
        loss, grads = fm_loss(self.f_beta, batch.s, batch.a, rng)
        info = self.beta.apply_gradients(grads)
        metrics["beta_loss"] = loss
        metrics["beta_grad_norm"] = info["grad_norm"]

    def pretrain_behavior(self, data, steps: int, rng, batch_size: int = 128,
                          lr_start: float = 3e-3, lr_end: float = 1e-4) -> float:
        """Fit ``f_beta`` alone on ``data`` with a cosine learning-rate decay.

        The lean adjoint differentiates ``f_beta``, so a behavior flow that is
        still underfit biases every adjoint-matching target.  Returns the last
        flow-matching loss.
        """
        loss = float("nan")
        lr_keep = self.beta.opt.lr
        for i in range(steps):
            self.beta.opt.lr = lr_end + (lr_start - lr_end) * 0.5 * (1 + math.cos(math.pi * i / steps))
            m: dict = {}
            self.behavior_step(data.sample(rng, batch_size), rng, m)
            loss = m["beta_loss"]
        self.beta.opt.lr = lr_keep
        if steps:
            self.behavior_pretrained()
        return loss

    def behavior_pretrained(self):
        pass

    def update(self, batch, rng) -> dict:
        raise NotImplementedError

    # -- checkpoints -----------------------------------------------------------

    def nets(self) -> dict[str, ParameterSet]:
        out = {"f_beta": self.beta.params}
        out.update(self.critic.nets())
        return out

    def load_nets(self, nets):
        self.beta.params = nets["f_beta"]
        self.critic.load_nets(nets)

    def state(self) -> dict:
        return {"steps": self.steps}

    def load_state(self, state):
        self.steps = int(state.get("steps", 0))


class QamAgent(Agent):
    """Q-learning with adjoint matching: ``f_theta`` fitted to lean adjoints of ``f_beta``."""

    def _build(self, rng):
        c = self.config
        net = init_mlp(rng, c.state_dim + c.action_dim + 1, c.action_dim, c.hidden, c.activation)
        if c.init_theta_from_beta:
            net = self.beta.params.copy()
        self.theta = Trainable(net, c.lr, c.actor_grad_clip)

    def behavior_pretrained(self):
        c = self.config
        if c.init_theta_from_beta:
            self.theta = Trainable(self.beta.params.copy(), c.lr, c.actor_grad_clip)

    @property
    def f_theta(self) -> VelocityField:
        return self._field(self.theta, "finetuned_theta")

    def policy_actions(self, s, rng, deterministic=False):
        z = self._noise(rng, s.shape[0], deterministic)
        return ode_sample(self.f_theta, s, z, self.config.T, clip=self.config.action_bound is not None)

    def adjoint(self, traj, g1):
        return lean_adjoint(self.f_beta, traj, g1)

    def matching_loss(self, traj, adj):
        return am_loss(self.f_theta, self.f_beta, traj, adj)

    def actor_step(self, batch, rng, metrics):
        c = self.config
        traj = sde_sample(self.f_theta, batch.s, self.grid, rng)
        g1 = np.zeros_like(traj.terminal)
        ok = traj.valid
        if ok.any():
            g1[ok] = boundary_adjoint(self.critic, batch.s[ok], traj.terminal[ok], c.tau, c.boundary_clip)
        adj = self.adjoint(traj, g1)
        loss, grads, used = self.matching_loss(traj, adj)
        metrics["dropped"] = float(len(batch) - used)
        if grads is None:
            metrics["actor_loss"] = float("nan")
            metrics["actor_grad_norm"] = float("nan")
            metrics["skipped"] = 1.0
            return
        info = self.theta.apply_gradients(grads)
        metrics["actor_loss"] = loss
        metrics["actor_grad_norm"] = info["grad_norm"]
        metrics["skipped"] = float(info["skipped"])

    def update(self, batch, rng) -> dict:
        metrics: dict = {}
        self.critic_step(batch, rng, metrics)
        self.actor_step(batch, rng, metrics)
        self.behavior_step(batch, rng, metrics)
        self.extra_step(batch, rng, metrics)
        self.finish_step()
        return metrics

    def extra_step(self, batch, rng, metrics):
        pass

    def nets(self):
        out = super().nets()
        out["f_theta"] = self.theta.params
        return out

    def load_nets(self, nets):
        super().load_nets(nets)
        self.theta.params = nets["f_theta"]


class BamAgent(QamAgent):
    """Ablation: the full (basic) adjoint, computed through ``f_theta``."""

    def adjoint(self, traj, g1):
        return basic_adjoint(self.f_theta, self.f_beta, traj, g1)

    def matching_loss(self, traj, adj):
        return bam_loss(self.f_theta, self.f_beta, traj, adj)


# ---------------------------------------------------------------------------
# one-step distillation


class OneStepPolicy:
    """``mu(s, z)``: a single network pass from noise to action."""

    def __init__(self, rng, state_dim, action_dim, hidden, activation, lr, alpha):
        self.net = Trainable(init_mlp(rng, state_dim + action_dim, action_dim, hidden, activation), lr)
        self.alpha = alpha
        self.state_dim = state_dim

    def __call__(self, s, z):
        return mlp_apply(self.net.params, np.concatenate([np.atleast_2d(s), z], axis=1))

    def step(self, critic, s, z, target, bound=None):
        """One Adam step on ``-Q(s, mu) + alpha |mu - target|^2`` (target constant)."""
        n = z.shape[0]
        mu, tape = mlp_forward(self.net.params, np.concatenate([s, z], axis=1))
        q_in = _clip(mu, bound)
        q, q_grad = critic.q_and_action_grad(s, q_in)
        if bound is not None:
            q_grad = q_grad * (np.abs(mu) <= bound)
        diff = mu - target
        loss = float(np.mean(-q + self.alpha * np.sum(diff**2, axis=1)))
        grads, _ = tape.backward((-q_grad + 2.0 * self.alpha * diff) / n)
        info = self.net.apply_gradients(grads)
        return loss, float(np.mean(np.sum(diff**2, axis=1))), info


class QamFqlAgent(QamAgent):
    """QAM plus a one-step policy distilled from ``f_theta`` that also maximises Q."""

    distill_from = "theta"

    def _build(self, rng):
        super()._build(rng)
        c = self.config
        self.one_step = OneStepPolicy(rng, c.state_dim, c.action_dim, c.hidden, c.activation, c.lr, c.alpha)

    def teacher(self):
        return self.f_theta

    def policy_actions(self, s, rng, deterministic=False):
        z = self._noise(rng, s.shape[0], deterministic)
        return _clip(self.one_step(s, z), self.config.action_bound)

    def extra_step(self, batch, rng, metrics):
        c = self.config
        z = rng.standard_normal((len(batch), c.action_dim))
        target = ode_sample(self.teacher(), batch.s, z, c.T, clip=c.action_bound is not None)
        loss, distill, _ = self.one_step.step(self.critic, batch.s, z, target, c.action_bound)
        metrics["onestep_loss"] = loss
        metrics["distill_mse"] = distill

    def nets(self):
        out = super().nets()
        out["one_step"] = self.one_step.net.params
        return out

    def load_nets(self, nets):
        super().load_nets(nets)
        self.one_step.net.params = nets["one_step"]


class FqlAgent(QamFqlAgent):
    """Baseline: one-step policy distilled from the behavior flow (no adjoint matching)."""

    def teacher(self):
        return self.f_beta

    def actor_step(self, batch, rng, metrics):
        pass


# ---------------------------------------------------------------------------
# edit policy


_LOG_2PI = math.log(2 * math.pi)


class EditPolicy:
    """Tanh-squashed Gaussian edit ``Delta = sigma_a * tanh(u)``, ``u ~ N(mean(s,a), std(s,a))``."""

    log_std_min, log_std_max = -5.0, 2.0

    def __init__(self, rng, state_dim, action_dim, hidden, activation, lr, sigma_a, eta=1.0):
        self.net = Trainable(init_mlp(rng, state_dim + action_dim, 2 * action_dim, hidden, activation), lr)
        self.log_eta = np.array([math.log(eta)])
        self.eta_opt = Trainable(ParameterSet([np.zeros((1, 1))], [self.log_eta.copy()], ["identity"]), lr)
        self.sigma_a = sigma_a
        self.A = action_dim
        self.target_entropy = -action_dim / 2.0

    @property
    def eta(self) -> float:
        return float(np.exp(self.eta_opt.params.biases[0][0]))

    def _heads(self, s, a):
        out = mlp_apply(self.net.params, np.concatenate([s, a], axis=1))
        return out[:, : self.A], np.clip(out[:, self.A :], self.log_std_min, self.log_std_max)

    def log_prob_from_u(self, u, mean, log_std):
        """Exact log-density of ``Delta = sigma_a tanh(u)`` at the sampled ``u``."""
        std = np.exp(log_std)
        eps = (u - mean) / std
        gauss = -0.5 * eps**2 - log_std - 0.5 * _LOG_2PI
        log_jac = np.log(self.sigma_a) + 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
        return np.sum(gauss - log_jac, axis=1)

    def sample(self, s, a, rng, deterministic=False):
        if self.sigma_a == 0.0:
            return np.zeros_like(a), None
        mean, log_std = self._heads(s, a)
        if deterministic:
            return self.sigma_a * np.tanh(mean), None
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return self.sigma_a * np.tanh(u), self.log_prob_from_u(u, mean, log_std)

    def step(self, critic, s, a, rng, bound=None):
        """Actor step on ``-Q(s, a + Delta) + eta log pi`` then one step on ``log eta``."""
        n = a.shape[0]
        out, tape = mlp_forward(self.net.params, np.concatenate([s, a], axis=1))
        mean, raw_ls = out[:, : self.A], out[:, self.A :]
        log_std = np.clip(raw_ls, self.log_std_min, self.log_std_max)
        std = np.exp(log_std)
        eps = rng.standard_normal(mean.shape)
        u = mean + std * eps
        th = np.tanh(u)
        delta = self.sigma_a * th
        log_pi = self.log_prob_from_u(u, mean, log_std)
        edited = a + delta
        q_in = _clip(edited, bound)
        q, q_grad = critic.q_and_action_grad(s, q_in)
        if bound is not None:
            q_grad = q_grad * (np.abs(edited) <= bound)
        eta = self.eta
        loss = float(np.mean(-q + eta * log_pi))
        # d/du of the per-sample loss; d log_pi/du = 2 tanh(u), d log_pi/d log_std = -1 (+ via u)
        d_u = -q_grad * self.sigma_a * (1.0 - th**2) + eta * 2.0 * th
        d_mean = d_u
        d_ls = d_u * std * eps - eta
        d_ls = d_ls * ((raw_ls >= self.log_std_min) & (raw_ls <= self.log_std_max))
        grads, _ = tape.backward(np.concatenate([d_mean, d_ls], axis=1) / n)
        self.net.apply_gradients(grads)

        entropy = -float(np.mean(log_pi))
        # minimise eta * (H - H_target): entropy above target lowers eta
        d_log_eta = eta * (entropy - self.target_entropy)
        g = self.eta_opt.params.with_arrays([np.zeros((1, 1)), np.array([d_log_eta])])
        self.eta_opt.apply_gradients(g)
        return loss, entropy


class QamEditAgent(QamAgent):
    """QAM base actions plus a bounded edit policy with automatic entropy tuning."""

    def _build(self, rng):
        super()._build(rng)
        c = self.config
        self.edit = EditPolicy(rng, c.state_dim, c.action_dim, c.hidden, c.activation, c.lr, c.sigma_a)

    def base_actions(self, s, rng, deterministic=False):
        return QamAgent.policy_actions(self, s, rng, deterministic)

    def policy_actions(self, s, rng, deterministic=False):
        a = self.base_actions(s, rng, deterministic)
        delta, _ = self.edit.sample(s, a, rng, deterministic)
        return _clip(a + delta, self.config.action_bound)

    def extra_step(self, batch, rng, metrics):
        if self.edit.sigma_a == 0.0:
            return
        a = self.base_actions(batch.s, rng)
        loss, entropy = self.edit.step(self.critic, batch.s, a, rng, self.config.action_bound)
        metrics["edit_loss"] = loss
        metrics["edit_entropy"] = entropy
        metrics["eta"] = self.edit.eta

    def nets(self):
        out = super().nets()
        out["edit"] = self.edit.net.params
        out["log_eta"] = self.edit.eta_opt.params
        return out

    def load_nets(self, nets):
        super().load_nets(nets)
        self.edit.net.params = nets["edit"]
        self.edit.eta_opt.params = nets["log_eta"]


# ---------------------------------------------------------------------------
# baselines without adjoint matching


class FawacAgent(Agent):
    """Advantage-weighted flow matching: weights ``min(exp(tau (Q - V)), 100)``."""

    max_weight = 100.0

    def _build(self, rng):
        c = self.config
        self.theta = Trainable(init_mlp(rng, c.state_dim + c.action_dim + 1, c.action_dim, c.hidden,
                                        c.activation), c.lr)
        self.value = Trainable(init_mlp(rng, c.state_dim, 1, c.hidden, c.activation), c.lr)

    @property
    def f_theta(self):
        return self._field(self.theta, "finetuned_theta")

    def policy_actions(self, s, rng, deterministic=False):
        z = self._noise(rng, s.shape[0], deterministic)
        return ode_sample(self.f_theta, s, z, self.config.T, clip=self.config.action_bound is not None)

    def weights(self, s, a):
        q = self.critic.q_values(s, a).mean(axis=0)
        v = mlp_apply(self.value.params, s)[:, 0]
        with np.errstate(over="ignore"):
            return np.minimum(np.exp(self.config.tau * (q - v)), self.max_weight)

    def update(self, batch, rng):
        metrics: dict = {}
        target = self.critic_step(batch, rng, metrics)
        if target is None:
            target = np.asarray(batch.r, dtype=np.float64)
        v, tape = mlp_forward(self.value.params, batch.s)
        err = v[:, 0] - target
        g, _ = tape.backward((2.0 * err / len(batch))[:, None])
        self.value.apply_gradients(g)
        metrics["value_loss"] = float(np.mean(err**2))
        w = self.weights(batch.s, batch.a)
        loss, grads = fm_loss(self.f_theta, batch.s, batch.a, rng, weights=w)
        info = self.theta.apply_gradients(grads)
        metrics["actor_loss"] = loss
        metrics["actor_grad_norm"] = info["grad_norm"]
        metrics["mean_weight"] = float(np.mean(w))
        self.finish_step()
        return metrics

    def nets(self):
        out = {"f_theta": self.theta.params, "value": self.value.params}
        out.update(self.critic.nets())
        return out

    def load_nets(self, nets):
        self.theta.params = nets["f_theta"]
        self.value.params = nets["value"]
        self.critic.load_nets(nets)


class FbracAgent(Agent):
    """Flow policy trained by back-propagating Q through the Euler chain plus ``alpha`` BC."""

    def _build(self, rng):
        c = self.config
        self.theta = Trainable(init_mlp(rng, c.state_dim + c.action_dim + 1, c.action_dim, c.hidden,
                                        c.activation), c.lr)
        self.skipped = 0

    @property
    def f_theta(self):
        return self._field(self.theta, "finetuned_theta")

    def policy_actions(self, s, rng, deterministic=False):
        z = self._noise(rng, s.shape[0], deterministic)
        return ode_sample(self.f_theta, s, z, self.config.T, clip=self.config.action_bound is not None)

    def update(self, batch, rng):
        c = self.config
        metrics: dict = {}
        self.critic_step(batch, rng, metrics)
        bc_loss, bc_grads = fm_loss(self.f_theta, batch.s, batch.a, rng)
        z = rng.standard_normal((len(batch), c.action_dim))
        a, backprop = ode_sample_recorded(self.f_theta, batch.s, z, c.T)
        a_in = _clip(a, c.action_bound)
        q, q_grad = self.critic.q_and_action_grad(batch.s, a_in)
        if c.action_bound is not None:
            q_grad = q_grad * (np.abs(a) <= c.action_bound)
        bptt_grads, _ = backprop(-q_grad / len(batch))
        grads = _add(bptt_grads, bc_grads, c.alpha)
        info = self.theta.apply_gradients(grads)
        self.skipped += int(info["skipped"])
        metrics["actor_loss"] = c.alpha * bc_loss - float(np.mean(q))
        metrics["actor_grad_norm"] = info["grad_norm"]
        metrics["skipped"] = float(info["skipped"])
        self.finish_step()
        return metrics

    def nets(self):
        out = {"f_theta": self.theta.params}
        out.update(self.critic.nets())
        return out

    def load_nets(self, nets):
        self.theta.params = nets["f_theta"]
        self.critic.load_nets(nets)


def cgql_velocity(f_beta, critic, s, a, t, guidance, tau):
    """``f_beta + guidance * ((1-t) tau grad_a Q(s, a) + a) / t`` (requires ``t > 0``)."""
    _, grad = critic.q_and_action_grad(s, a)
    return f_beta(s, a, t) + guidance * ((1.0 - t) * tau * grad + a) / t


class CgqlAgent(Agent):
    """Classifier-guidance baseline: behavior flow plus a Q-gradient velocity."""

    def guided_sample(self, s, z):
        c = self.config
        h = 1.0 / c.T
        a = np.array(z, dtype=np.float64)
        f_beta = self.f_beta
        for k in range(c.T):
            t = k * h
            # the guidance term is singular at t = 0; the first step follows f_beta alone
            v = f_beta(s, a, t) if k == 0 else cgql_velocity(f_beta, self.critic, s, a, t, c.guidance, c.tau)
            a = a + h * v
        return _clip(a, c.action_bound)

    def policy_actions(self, s, rng, deterministic=False):
        return self.guided_sample(s, self._noise(rng, s.shape[0], deterministic))

    def update(self, batch, rng):
        metrics: dict = {}
        self.critic_step(batch, rng, metrics)
        self.behavior_step(batch, rng, metrics)
        self.finish_step()
        return metrics


AGENTS = {
    "qam": QamAgent,
    "bam": BamAgent,
    "qam-fql": QamFqlAgent,
    "qam-edit": QamEditAgent,
    "fql": FqlAgent,
    "fawac": FawacAgent,
    "fbrac": FbracAgent,
    "cgql": CgqlAgent,
}


def make_agent(config: AgentConfig, rng, critic=None) -> Agent:
    return AGENTS[config.kind](config, rng, critic)
