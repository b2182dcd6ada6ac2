"""Toy environments with exact oracles."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GaussTiltBandit:
    """One-step bandit with reward ``Q*(a) = b.a - 0.5 a^T diag(C) a``.

    Actions are unbounded: the behavior law is a full Gaussian and the tilted
    optimum may sit outside ``[-1, 1]``.
    """

    name = "gauss-bandit"
    state_dim = 1
    action_bound = None
    gamma = 0.0

    def __init__(self, action_dim=2, mu=None, sigma=None, b=None, C=None):
        self.action_dim = action_dim
        self.mu = np.zeros(action_dim) if mu is None else np.asarray(mu, dtype=np.float64)
        self.sigma = np.ones(action_dim) if sigma is None else np.asarray(sigma, dtype=np.float64)
        self.b = np.eye(action_dim)[0] if b is None else np.asarray(b, dtype=np.float64)
        self.C = np.zeros(action_dim) if C is None else np.asarray(C, dtype=np.float64)
        self.clipped_actions = 0

    def reward(self, a):
        a = np.asarray(a, dtype=np.float64)
        return a @ self.b - 0.5 * np.sum(self.C * a * a, axis=-1)

    def reset(self, rng=None):
        return np.zeros(1)

    def step(self, a):
        return np.zeros(1), float(self.reward(a)), True

    def behavior(self, rng, n):
        return self.mu + np.sqrt(self.sigma) * rng.standard_normal((n, self.action_dim))


class BimodalBandit(GaussTiltBandit):
    """Behavior is an equal mixture of two Gaussians; reward peaks at the second mode."""

    name = "bimodal-bandit"

    def __init__(self, m1=(-0.5, -0.5), m2=(0.5, 0.5), std=0.1):
        m1, m2 = np.asarray(m1, dtype=np.float64), np.asarray(m2, dtype=np.float64)
        if np.linalg.norm(m1 - m2) < 6 * std:
            raise ValueError("modes must be at least 6 std apart")
        super().__init__(action_dim=m1.size)
        self.m1, self.m2, self.std = m1, m2, std

    def reward(self, a):
        a = np.asarray(a, dtype=np.float64)
        return -np.sum((a - self.m2) ** 2, axis=-1)

    def behavior(self, rng, n):
        pick = rng.uniform(size=n) < 0.5
        centers = np.where(pick[:, None], self.m1, self.m2)
        return centers + self.std * rng.standard_normal((n, self.action_dim))


@dataclass
class Wall:
    """Axis-aligned segment: ``axis=0`` is a vertical wall at ``x=pos`` over ``lo..hi`` in y."""

    axis: int
    pos: float
    lo: float
    hi: float


def default_walls():
    return [Wall(0, 0.5, 0.25, 0.75)]


@dataclass
class PointMaze2D:
    """Point mass in the unit square; displacement ``0.05 * a`` per step.

    Reward is 1 (and the episode terminates) while the current position is in
    the goal disc.  Movement is applied one axis at a time; a wall stops motion
    along its normal axis just short of the wall, so nothing tunnels through.
    """

    walls: list = field(default_factory=default_walls)
    start: tuple = (0.11, 0.51)
    start_jitter: float = 0.03
    goal: tuple = (0.91, 0.51)
    goal_radius: float = 0.08
    step_scale: float = 0.05
    max_steps: int = 100
    gamma: float = 0.99

    name = "point-maze"
    state_dim = 2
    action_dim = 2
    action_bound = 1.0
    _eps = 1e-6

    def __post_init__(self):
        self.pos = np.array(self.start, dtype=np.float64)
        self.t = 0
        self.clipped_actions = 0

    def at_goal(self, pos) -> bool:
        return bool(np.linalg.norm(np.asarray(pos) - np.asarray(self.goal)) <= self.goal_radius)

    def move(self, pos, a):
        p = np.array(pos, dtype=np.float64)
        d = self.step_scale * np.asarray(a, dtype=np.float64)
        for axis in (0, 1):
            other = 1 - axis
            new = p[axis] + d[axis]
            for w in self.walls:
                if w.axis != axis or not (w.lo <= p[other] <= w.hi):
                    continue
                if p[axis] < w.pos <= new:
                    new = min(new, w.pos - self._eps)
                elif new <= w.pos < p[axis]:
                    new = max(new, w.pos + self._eps)
            p[axis] = min(max(new, 0.0), 1.0)
        return p

    def reset(self, rng=None, pos=None):
        if pos is not None:
            self.pos = np.array(pos, dtype=np.float64)
        else:
            jitter = 0.0 if rng is None else rng.uniform(-self.start_jitter, self.start_jitter, 2)
            self.pos = np.array(self.start, dtype=np.float64) + jitter
        self.t = 0
        return self.pos.copy()

    def step(self, a):
        a = np.asarray(a, dtype=np.float64)
        if np.any(np.abs(a) > 1.0):
            self.clipped_actions += 1
            a = np.clip(a, -1.0, 1.0)
        self.t += 1
        if self.at_goal(self.pos):
            return self.pos.copy(), 1.0, True
        self.pos = self.move(self.pos, a)
        return self.pos.copy(), 0.0, self.t >= self.max_steps

    # -- scripted behavior ---------------------------------------------------

    def routes(self, k: int):
        """Waypoint lists around the wall: over the top, under the bottom, then wider detours."""
        gx, gy = self.goal
        options = [
            [(0.45, 0.85), (0.6, 0.85), (gx, gy)],
            [(0.45, 0.15), (0.6, 0.15), (gx, gy)],
            [(0.3, 0.93), (0.7, 0.93), (gx, gy)],
            [(0.3, 0.07), (0.7, 0.07), (gx, gy)],
        ]
        return [options[i % len(options)] for i in range(k)]

    def grid_policy(self, pos, n: int = 50):
        """Deterministic policy defined on ``n x n`` cells.

        Moves are whole cells (``|di|, |dj| <= 2``) so trajectories started at
        cell centres stay on centres; the route goes over the wall and never
        presses into it.
        """
        i = min(int(pos[0] * n), n - 1)
        j = min(int(pos[1] * n), n - 1)
        wall_i = int(round(0.5 * n)) - 1
        top_j = int(0.8 * n)
        if i <= wall_i and j < top_j:
            ti, tj = wall_i, top_j + 2
            di = int(np.clip(ti - i, -2, 2))
            dj = int(np.clip(tj - j, -2, 2))
        else:
            gi = min(int(self.goal[0] * n), n - 1)
            gj = min(int(self.goal[1] * n), n - 1)
            di = int(np.clip(gi - i, -2, 2))
            dj = int(np.clip(gj - j, -2, 2))
        return np.array([di, dj], dtype=np.float64) / (n * self.step_scale)


def make_env(name: str, **kw):
    if name in ("gauss-bandit", "bandit"):
        return GaussTiltBandit(**kw)
    if name == "bimodal-bandit":
        return BimodalBandit(**kw)
    if name == "point-maze":
        return PointMaze2D(**kw)
    raise ValueError(f"unknown environment {name!r}")
