"""State-conditioned flow policies: flow-matching loss, ODE and memory-less SDE samplers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ParameterSet, UsageError, ConfigurationError, init_mlp, mlp_apply, mlp_forward


def _batch_t(t, n):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full((n, 1), float(t))
    return t.reshape(n, 1)


class FieldTape:
    """Tape of one field evaluation, split back into state/action/time cotangents."""

    def __init__(self, tape, state_dim, action_dim):
        self._tape = tape
        self._s = state_dim
        self._a = action_dim

    def backward(self, cot, param_grads=True):
        grads, g_in = self._tape.backward(cot, param_grads)
        return grads, g_in[:, self._s : self._s + self._a]


@dataclass
class VelocityField:
    """``f(s, a, t)`` backed by an MLP over the concatenated input ``[s, a, t]``."""

    net: ParameterSet
    state_dim: int
    action_dim: int
    role: str = "finetuned_theta"

    def __post_init__(self):
        if self.net.in_dim != self.state_dim + self.action_dim + 1:
            raise ConfigurationError("velocity net input must be S + A + 1")
        if self.net.out_dim != self.action_dim:
            raise ConfigurationError("velocity net output must equal the action dimension")

    @classmethod
    def init(cls, rng, state_dim, action_dim, hidden=(64, 64), activation="gelu", role="finetuned_theta"):
        net = init_mlp(rng, state_dim + action_dim + 1, action_dim, hidden, activation)
        return cls(net, state_dim, action_dim, role)

    def _inputs(self, s, a, t):
        a = np.asarray(a, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64).reshape(a.shape[0], self.state_dim)
        return np.concatenate([s, a, _batch_t(t, a.shape[0])], axis=1)

    def __call__(self, s, a, t):
        return mlp_apply(self.net, self._inputs(s, a, t))

    def forward(self, s, a, t):
        out, tape = mlp_forward(self.net, self._inputs(s, a, t))
        return out, FieldTape(tape, self.state_dim, self.action_dim)

    def action_vjp(self, s, a, t, cot):
        """Return ``f(s,a,t)`` and ``(d f / d a)^T cot`` row-wise."""
        out, tape = self.forward(s, a, t)
        _, g_a = tape.backward(cot, param_grads=False)
        return out, g_a

    def with_net(self, net):
        return VelocityField(net, self.state_dim, self.action_dim, self.role)


# ---------------------------------------------------------------------------
# time grid and noise schedule


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with step ``h = 1/T``; the SDE nodes are ``h, 2h, ..., 1-h``."""

    T: int = 10

    def __post_init__(self):
        if self.T < 2:
            raise ConfigurationError("time grid needs T >= 2")

    @property
    def h(self) -> float:
        return 1.0 / self.T

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.T) / self.T

    @property
    def times(self) -> np.ndarray:
        """Nodes plus the terminal time 1."""
        return np.arange(1, self.T + 1) / self.T


def sigma(t):
    """Memory-less noise scale ``sqrt(2 (1 - t) / t)``."""
    t = np.asarray(t, dtype=np.float64)
    return np.sqrt(2.0 * (1.0 - t) / t)


# ---------------------------------------------------------------------------
# flow matching


def fm_loss(field, states, actions, rng, weights=None):
    """Flow-matching regression loss and its parameter gradient.

    Each pair draws ``t ~ U[0,1]`` and ``z ~ N(0, I)``; the field is regressed onto
    ``a - z`` at ``(1-t) z + t a``.  Optional per-sample ``weights`` are treated as
    constants (used by advantage-weighted variants).
    """
    actions = np.asarray(actions, dtype=np.float64)
    n = actions.shape[0]
    if n == 0:
        raise UsageError("fm_loss needs a nonempty batch")
    t = rng.uniform(size=(n, 1))
    z = rng.standard_normal(actions.shape)
    x_t = (1.0 - t) * z + t * actions
    pred, tape = field.forward(states, x_t, t)
    resid = pred - (actions - z)
    w = np.ones((n, 1)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n, 1)
    loss = float(np.mean(w[:, 0] * np.sum(resid**2, axis=1)))
    grads, _ = tape.backward(2.0 * w * resid / n)
    return loss, grads


# ---------------------------------------------------------------------------
# samplers


def ode_sample(field, s, z0, T: int = 10, clip: bool = True):
    """Euler-integrate ``da = f(s, a, t) dt`` from ``z0`` over ``[0, 1]`` in ``T`` steps."""
    a = np.array(z0, dtype=np.float64)
    h = 1.0 / T
    for k in range(T):
        a = a + h * field(s, a, k * h)
    return np.clip(a, -1.0, 1.0) if clip else a


def ode_sample_recorded(field, s, z0, T: int = 10):
    """ODE sample that keeps per-step tapes for back-propagation through time.

    Returns ``(action_unclipped, backprop)`` where ``backprop(cot)`` maps the
    cotangent of the unclipped action to ``(param_grads, cot_z0)``.
    """
    a = np.array(z0, dtype=np.float64)
    h = 1.0 / T
    tapes = []
    for k in range(T):
        out, tape = field.forward(s, a, k * h)
        tapes.append(tape)
        a = a + h * out

    def backprop(cot):
        cot = np.array(cot, dtype=np.float64)
        total = None
        for tape in reversed(tapes):
            g, g_a = tape.backward(h * cot)
            total = g if total is None else total.with_arrays(
                [x + y for x, y in zip(total.arrays(), g.arrays())]
            )
            cot = cot + g_a
        return total, cot

    return a, backprop


@dataclass
class SdeTrajectory:
    """Discrete memory-less SDE path.

    ``states[k]`` is the action at ``grid.times[k]`` for ``k = 0..T-1``; the last
    entry is the terminal action ``a_1``.  ``noises[k]`` drove the step from
    ``states[k]`` to ``states[k+1]``.  Rows of ``valid`` flag finite trajectories.
    """

    grid: TimeGrid
    s: np.ndarray
    states: np.ndarray
    noises: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.isfinite(self.states).all(axis=(0, 2))

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def subset(self, mask):
        return SdeTrajectory(self.grid, self.s[mask], self.states[:, mask],
                             self.noises[:, mask], self.valid[mask])


def sde_step(field, s, a, t, h, z):
    drift = 2.0 * field(s, a, t) - a / t
    return a + h * drift + np.sqrt(2.0 * h * (1.0 - t) / t) * z


def sde_sample(field, s, grid: TimeGrid, rng, n: int | None = None, a_init=None) -> SdeTrajectory:
    """Sample memory-less SDE trajectories for each row of ``s``.

    The first state lives on ``t = h`` and is drawn from ``N(0, I)``; this is
    exactly what the ``t = 0`` Euler step produces, since that step multiplies
    the previous state by ``1 - h/h = 0``.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if n is None:
        n = s.shape[0]
    elif s.shape[0] == 1 and n > 1:
        s = np.repeat(s, n, axis=0)
    A = _action_dim(field)
    a = rng.standard_normal((n, A)) if a_init is None else np.array(a_init, dtype=np.float64)
    noises = rng.standard_normal((grid.T - 1, n, A))
    return sde_replay(field, s, grid, a, noises)


def sde_replay(field, s, grid: TimeGrid, a_init, noises) -> SdeTrajectory:
    h = grid.h
    states = np.empty((grid.T,) + np.shape(a_init))
    states[0] = a_init
    with np.errstate(over="ignore", invalid="ignore"):
        for k, t in enumerate(grid.nodes):
            states[k + 1] = sde_step(field, s, states[k], t, h, noises[k])
    return SdeTrajectory(grid, s, states, np.asarray(noises))


def _action_dim(field):
    return field.action_dim
