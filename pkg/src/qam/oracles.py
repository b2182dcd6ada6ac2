"""Closed-form ground truths used by the tests: Gaussian flows, tilts, DP values."""
from __future__ import annotations

import numpy as np

from .flow import TimeGrid, sigma
from .nn import DomainError

_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # renamed in numpy 2


def tilted_gaussian_oracle(mu, sigma_diag, tau, b, C_diag=None):
    """Moments of ``N(mu, diag(sigma_diag)) * exp(tau (b.a - 0.5 a^T diag(C) a))``.

    Returns ``(mean, var)``; ``sigma_diag`` holds variances.
    """
    mu = np.asarray(mu, dtype=np.float64)
    var0 = np.asarray(sigma_diag, dtype=np.float64) * np.ones_like(mu)
    b = np.asarray(b, dtype=np.float64) * np.ones_like(mu)
    C = np.zeros_like(mu) if C_diag is None else np.asarray(C_diag, dtype=np.float64) * np.ones_like(mu)
    prec = 1.0 / var0 + tau * C
    if np.any(prec <= 0) or not np.all(np.isfinite(prec)):
        raise DomainError("tilted precision must be positive in every coordinate")
    var = 1.0 / prec
    return var * (mu / var0 + tau * b), var


def tilted_moments_by_quadrature(mu, var, tau, b, C=0.0, clip_grad=False, half_width=12.0, n=200001):
    """1-D moments of the tilted density by trapezoidal quadrature.

    With ``clip_grad`` the tilt uses the Q whose gradient is ``clip(tau*grad Q)``
    (what clipped boundary adjoints actually target).
    """
    sd = np.sqrt(var)
    x = np.linspace(mu - half_width * max(sd, 1.0), mu + half_width * max(sd, 1.0), n)
    if clip_grad:
        # antiderivative of clip(tau (b - C x), -1, 1)
        g = np.clip(tau * (b - C * x), -1.0, 1.0)
        logq = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(x))])
    else:
        logq = tau * (b * x - 0.5 * C * x * x)
    logp = -0.5 * (x - mu) ** 2 / var + logq
    w = np.exp(logp - logp.max())
    z = _trapezoid(w, x)
    m = _trapezoid(w * x, x) / z
    v = _trapezoid(w * (x - m) ** 2, x) / z
    return m, v


class GaussianField:
    """Optimal flow-matching velocity for data ``N(mean, diag(std^2))`` and noise ``N(0, I)``.

    ``f(x, t) = mean + ((t std^2 - (1-t)) / c_t^2) (x - t mean)``, ``c_t^2 = (1-t)^2 + t^2 std^2``.
    """

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.std = np.asarray(std, dtype=np.float64) * np.ones_like(self.mean)
        self.action_dim = self.mean.size

    def gain(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim:
            t = t[:, None]
        var = self.std**2
        c2 = (1.0 - t) ** 2 + t**2 * var
        return (t * var - (1.0 - t)) / c2

    def __call__(self, s, a, t):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        tt = np.asarray(t, dtype=np.float64)
        tt = tt[:, None] if tt.ndim else tt
        return self.mean + self.gain(t) * (a - tt * self.mean)

    def action_vjp(self, s, a, t, cot):
        return self(s, a, t), self.gain(t) * cot


class NodeAffineField:
    """Per-node affine field ``f(a, t_k) = c0[k] + c1[k] * a`` (diagonal), defined on grid nodes."""

    def __init__(self, grid: TimeGrid, c0, c1):
        self.grid = grid
        self.c0 = np.asarray(c0, dtype=np.float64)
        self.c1 = np.asarray(c1, dtype=np.float64)
        self.action_dim = self.c0.shape[1]

    def _k(self, t):
        t = np.asarray(t, dtype=np.float64)
        k = np.rint(t * self.grid.T).astype(int) - 1
        if np.any(np.abs((k + 1) / self.grid.T - t) > 1e-9) or np.any(k < 0) or np.any(k >= self.grid.T - 1):
            raise DomainError("NodeAffineField is only defined on grid nodes")
        return k

    def __call__(self, s, a, t):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        k = self._k(t)
        return self.c0[k] + self.c1[k] * a

    def action_vjp(self, s, a, t, cot):
        return self(s, a, t), self.c1[self._k(t)] * cot


def discrete_am_optimum(behavior: GaussianField, grid: TimeGrid, tau, b, C=None):
    """Exact stationary point of the discretised adjoint-matching loss.

    For a Gaussian behavior field and a quadratic critic (unclipped boundary),
    the lean adjoint is linear in ``a_1`` and the optimal field is affine at each
    node.  Solving the stationarity condition
    ``f(a, t_k) = f_beta(a, t_k) - (sigma_k^2 / 2) E[g_k | a_k = a]`` backwards in
    time gives the coefficients in closed form.
    """
    A = behavior.action_dim
    b = np.asarray(b, dtype=np.float64) * np.ones(A)
    C = np.zeros(A) if C is None else np.asarray(C, dtype=np.float64) * np.ones(A)
    T, h = grid.T, grid.h
    times = grid.times
    mu, var = behavior.mean, behavior.std**2

    def beta_coeffs(t):
        c2 = (1 - t) ** 2 + t**2 * var
        g = (t * var - (1 - t)) / c2
        return mu - g * t * mu, g

    # lean adjoint multiplier L[k]: g_k = L[k] * g_1, g_1 = tau (C a_1 - b)
    L = np.ones((T, A))
    for k in range(T - 1, 0, -1):
        _, g1 = beta_coeffs(times[k])
        L[k - 1] = L[k] * (1 + h * (2 * g1 - 1 / times[k]))

    c0 = np.zeros((T - 1, A))
    c1 = np.zeros((T - 1, A))
    P, q = np.ones(A), np.zeros(A)  # E[a_1 | a_{k+1}] = P a + q
    for k in range(T - 2, -1, -1):
        t = times[k]
        half_s2 = 0.5 * sigma(t) ** 2
        b0, b1 = beta_coeffs(t)
        kappa = half_s2 * tau * L[k] * C * P
        c1[k] = (b1 - kappa * (1 - h / t)) / (1 + 2 * h * kappa)
        c0[k] = (b0 - half_s2 * tau * L[k] * (C * q - b)) / (1 + 2 * h * kappa)
        q = q + 2 * h * P * c0[k]
        P = P * (1 + h * (2 * c1[k] - 1 / t))
    return NodeAffineField(grid, c0, c1)


class ShiftedField:
    """``base(s,a,t) + net(s,a,t)``; only the net carries parameters."""

    def __init__(self, base, net_field):
        self.base = base
        self.net_field = net_field
        self.action_dim = net_field.action_dim
        self.state_dim = net_field.state_dim

    def __call__(self, s, a, t):
        return self.base(s, a, t) + self.net_field(s, a, t)

    def forward(self, s, a, t):
        out, tape = self.net_field.forward(s, a, t)
        return self.base(s, a, t) + out, _ShiftedTape(tape, self.base, s, a, t)

    def action_vjp(self, s, a, t, cot):
        out, g = self.net_field.action_vjp(s, a, t, cot)
        base, gb = self.base.action_vjp(s, a, t, cot)
        return out + base, g + gb


class _ShiftedTape:
    def __init__(self, tape, base, s, a, t):
        self.tape, self.base, self.args = tape, base, (s, a, t)

    def backward(self, cot, param_grads=True):
        grads, g_a = self.tape.backward(cot, param_grads)
        _, gb = self.base.action_vjp(*self.args, cot)
        return grads, g_a + gb


# ---------------------------------------------------------------------------
# dynamic programming on the maze


def dp_policy_value(maze, policy, n: int = 50, gamma: float | None = None, tol: float = 1e-8,
                    max_iter: int = 100000):
    """Policy evaluation on an ``n x n`` cell discretisation of a :class:`PointMaze2D`.

    ``policy(pos) -> action`` is queried at cell centres; each cell's successor
    is the cell containing ``maze.move(center, action)``.  Rewards follow the
    environment: 1 and absorbing inside the goal disc, 0 elsewhere.  Returns an
    ``(n, n)`` array indexed ``[ix, iy]``.
    """
    gamma = maze.gamma if gamma is None else gamma
    centers = (np.arange(n) + 0.5) / n
    nxt = np.zeros((n, n), dtype=int)
    reward = np.zeros((n, n))
    terminal = np.zeros((n, n), dtype=bool)
    for i, x in enumerate(centers):
        for j, y in enumerate(centers):
            pos = np.array([x, y])
            if maze.at_goal(pos):
                reward[i, j] = 1.0
                terminal[i, j] = True
                nxt[i, j] = i * n + j
                continue
            p2 = maze.move(pos, np.clip(policy(pos), -1.0, 1.0))
            ci = min(int(p2[0] * n), n - 1)
            cj = min(int(p2[1] * n), n - 1)
            nxt[i, j] = ci * n + cj
    V = np.zeros(n * n)
    r, term, nx = reward.ravel(), terminal.ravel(), nxt.ravel()
    for _ in range(max_iter):
        V_new = r + gamma * np.where(term, 0.0, V[nx])
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    return V.reshape(n, n)
