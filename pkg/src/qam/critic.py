"""Q-function ensembles with EMA targets and the pessimistic TD backup."""
from __future__ import annotations

import numpy as np

from .nn import EmaTracker, ParameterSet, Trainable, init_mlp, mlp_apply, mlp_forward


class CriticEnsemble:
    """``K`` Q-networks over ``[s, a]`` plus exponential-moving-average targets.

    ``std_mode="sum"`` spreads the ensemble as ``sqrt(sum_k (Q_k - mean)^2)``,
    without any ``1/K`` normalisation; ``"sample"`` uses the usual ``K-1`` form.
    """

    trainable = True

    def __init__(
        self,
        members: list[ParameterSet],
        state_dim: int,
        action_dim: int,
        rho: float = 0.5,
        ema_rate: float = 5e-3,
        lr: float = 3e-4,
        max_grad_norm: float | None = None,
        std_mode: str = "sum",
    ):
        if not members:
            raise ValueError("ensemble needs at least one member")
        if std_mode not in ("sum", "sample"):
            raise ValueError(f"unknown std_mode {std_mode!r}")
        self.members = [Trainable(p, lr, max_grad_norm) for p in members]
        self.targets = [EmaTracker(p.copy(), ema_rate) for p in members]
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.rho = rho
        self.std_mode = std_mode

    @classmethod
    def init(cls, rng, state_dim, action_dim, K=10, hidden=(64, 64), activation="gelu", **kw):
        members = [init_mlp(rng, state_dim + action_dim, 1, hidden, activation) for _ in range(K)]
        return cls(members, state_dim, action_dim, **kw)

    @property
    def K(self) -> int:
        return len(self.members)

    def _inputs(self, s, a):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        s = np.asarray(s, dtype=np.float64).reshape(a.shape[0], self.state_dim)
        return np.concatenate([s, a], axis=1)

    def q_values(self, s, a, use_targets: bool = False) -> np.ndarray:
        """Member values, shape ``(K, batch)``."""
        x = self._inputs(s, a)
        nets = [t.target for t in self.targets] if use_targets else [m.params for m in self.members]
        return np.stack([mlp_apply(p, x)[:, 0] for p in nets])

    def spread(self, q: np.ndarray) -> np.ndarray:
        dev = q - q.mean(axis=0)
        if self.std_mode == "sum":
            return np.sqrt(np.sum(dev**2, axis=0))
        if q.shape[0] < 2:
            return np.zeros(q.shape[1])
        return np.sqrt(np.sum(dev**2, axis=0) / (q.shape[0] - 1))

    def pessimistic_target(self, s_next, a_next, r, done, gamma: float) -> np.ndarray:
        q = self.q_values(s_next, a_next, use_targets=True)
        boot = q.mean(axis=0) - self.rho * self.spread(q)
        return np.asarray(r, dtype=np.float64) + (1.0 - np.asarray(done, dtype=np.float64)) * gamma * boot

    def td_loss(self, s, a, targets):
        """Mean squared TD error over batch and members; gradients for every member."""
        x = self._inputs(s, a)
        targets = np.asarray(targets, dtype=np.float64)
        n = x.shape[0]
        loss, grads = 0.0, []
        for m in self.members:
            q, tape = mlp_forward(m.params, x)
            err = q[:, 0] - targets
            loss += float(np.mean(err**2))
            g, _ = tape.backward((2.0 * err / (n * self.K))[:, None])
            grads.append(g)
        return loss / self.K, grads

    def apply_gradients(self, grads) -> list[dict]:
        return [m.apply_gradients(g) for m, g in zip(self.members, grads)]

    def update_targets(self) -> None:
        for tr, m in zip(self.targets, self.members):
            tr.update(m.params)

    def q_and_action_grad(self, s, a, use_targets: bool = False):
        """Ensemble-mean Q and its action gradient (one VJP per member)."""
        x = self._inputs(s, a)
        nets = [t.target for t in self.targets] if use_targets else [m.params for m in self.members]
        n = x.shape[0]
        q = np.zeros(n)
        grad = np.zeros((n, self.action_dim))
        cot = np.full((n, 1), 1.0 / len(nets))
        for p in nets:
            out, tape = mlp_forward(p, x)
            q += out[:, 0] / len(nets)
            _, g_in = tape.backward(cot, param_grads=False)
            grad += g_in[:, self.state_dim :]
        return q, grad

    def nets(self) -> dict[str, ParameterSet]:
        out = {}
        for i, (m, t) in enumerate(zip(self.members, self.targets)):
            out[f"critic{i}"] = m.params
            out[f"critic{i}_target"] = t.target
        return out

    def load_nets(self, nets: dict[str, ParameterSet]) -> None:
        for i, (m, t) in enumerate(zip(self.members, self.targets)):
            m.params = nets[f"critic{i}"]
            t.target = nets[f"critic{i}_target"]


def pessimistic_target(ensemble, s_next, a_next, r, done, gamma):
    return ensemble.pessimistic_target(s_next, a_next, r, done, gamma)


def td_loss(ensemble, s, a, targets):
    return ensemble.td_loss(s, a, targets)


def q_mean_and_action_grad(ensemble, s, a, use_targets: bool = False):
    return ensemble.q_and_action_grad(s, a, use_targets)


class AnalyticCritic:
    """Fixed ``Q(s, a) = b.a - 0.5 a^T diag(C) a``; never trained.

    Stands in for a learned critic when the test needs the exact reward.
    """

    trainable = False

    def __init__(self, b, C=None):
        self.b = np.asarray(b, dtype=np.float64)
        self.C = np.zeros_like(self.b) if C is None else np.asarray(C, dtype=np.float64)
        self.action_dim = self.b.size

    def __call__(self, s, a):
        a = np.atleast_2d(a)
        return a @ self.b - 0.5 * np.sum(self.C * a * a, axis=1)

    def q_values(self, s, a, use_targets: bool = False):
        return self(s, a)[None, :]

    def q_and_action_grad(self, s, a, use_targets: bool = False):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return self(s, a), self.b - self.C * a

    def pessimistic_target(self, s_next, a_next, r, done, gamma):
        return np.asarray(r, dtype=np.float64) + (1.0 - np.asarray(done, dtype=np.float64)) * gamma * self(s_next, a_next)

    def nets(self):
        return {}

    def load_nets(self, nets):
        pass
