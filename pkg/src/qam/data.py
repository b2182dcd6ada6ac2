"""Transition storage, offline data generation and the on-disk dataset format."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import BimodalBandit, GaussTiltBandit, PointMaze2D
from .nn import seeded_rng

FORMAT_VERSION = 1


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.s.shape[0]


class Dataset:
    """Immutable, contiguous transition arrays."""

    def __init__(self, s, a, r, s_next, done, env_name="", seed=0):
        self.s = np.asarray(s, dtype=np.float64)
        self.a = np.asarray(a, dtype=np.float64)
        self.r = np.asarray(r, dtype=np.float64)
        self.s_next = np.asarray(s_next, dtype=np.float64)
        self.done = np.asarray(done, dtype=bool)
        self.env_name = env_name
        self.seed = seed
        n = self.s.shape[0]
        if not (self.a.shape[0] == self.r.shape[0] == self.s_next.shape[0] == self.done.shape[0] == n):
            raise ValueError("transition arrays differ in length")
        for arr in (self.s, self.a, self.s_next):
            arr.setflags(write=False)

    def __len__(self):
        return self.s.shape[0]

    @property
    def state_dim(self):
        return self.s.shape[1]

    @property
    def action_dim(self):
        return self.a.shape[1]

    def take(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def sample(self, rng, n) -> Batch:
        return self.take(rng.integers(0, len(self), n))


class ReplayBuffer:
    """Fixed-capacity ring buffer for online transitions."""

    def __init__(self, state_dim, action_dim, capacity):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s_next, done):
        i = self.cursor
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = s, a, r, s_next, done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def take(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


class MixedSampler:
    """Uniform sampling over the union of an offline dataset and an online buffer."""

    def __init__(self, offline: Dataset, online: ReplayBuffer | None = None):
        self.offline = offline
        self.online = online

    def __len__(self):
        return len(self.offline) + (len(self.online) if self.online is not None else 0)

    def sample(self, rng, n) -> Batch:
        idx = rng.integers(0, len(self), n)
        n_off = len(self.offline)
        if self.online is None or len(self.online) == 0:
            return self.offline.take(idx)
        off = idx < n_off
        b_off = self.offline.take(idx[off])
        b_on = self.online.take(idx[~off] - n_off)
        order = np.argsort(np.concatenate([np.flatnonzero(off), np.flatnonzero(~off)]), kind="stable")
        cat = lambda x, y: np.concatenate([x, y])[order]
        return Batch(cat(b_off.s, b_on.s), cat(b_off.a, b_on.a), cat(b_off.r, b_on.r),
                     cat(b_off.s_next, b_on.s_next), cat(b_off.done, b_on.done))


# ---------------------------------------------------------------------------
# generation


def gen_dataset(env, behavior: str = "default", n: int = 10000, seed: int = 0,
                routes: int = 2, noise: float = 0.02, mu=None, sigma=None, modes=None,
                mode_std: float = 0.1) -> Dataset:
    """Offline data for one of the toy environments.

    ``behavior`` is ``"gaussian"`` / ``"mixture"`` for bandits and
    ``"scripted_routes"`` for the maze; ``"default"`` picks the natural one.
    For the maze, ``n`` counts transitions; the last episode is truncated.
    """
    rng = seeded_rng(seed, "gen-data")
    if isinstance(env, PointMaze2D):
        if behavior not in ("default", "scripted_routes"):
            raise ValueError(f"maze supports scripted_routes behavior, not {behavior!r}")
        return _maze_routes(env, rng, n, routes, noise, seed)

    A = env.action_dim
    if behavior == "default":
        behavior = "mixture" if isinstance(env, BimodalBandit) else "gaussian"
    if behavior == "gaussian":
        mu = env.mu if mu is None else np.asarray(mu, dtype=np.float64)
        var = env.sigma if sigma is None else np.asarray(sigma, dtype=np.float64)
        a = mu + np.sqrt(var) * rng.standard_normal((n, A))
    elif behavior == "mixture":
        if modes is None:
            modes = (getattr(env, "m1", -0.5 * np.ones(A)), getattr(env, "m2", 0.5 * np.ones(A)))
        modes = np.asarray(modes, dtype=np.float64)
        pick = rng.integers(0, len(modes), n)
        a = modes[pick] + mode_std * rng.standard_normal((n, A))
    else:
        raise ValueError(f"unknown bandit behavior {behavior!r}")
    r = env.reward(a)
    s = np.zeros((n, 1))
    return Dataset(s, a, r, s.copy(), np.ones(n, dtype=bool), env.name, seed)


def scripted_action(env: PointMaze2D, pos, waypoints, wp_idx, rng, noise):
    while wp_idx < len(waypoints) - 1 and np.linalg.norm(np.asarray(waypoints[wp_idx]) - pos) < 0.05:
        wp_idx += 1
    d = (np.asarray(waypoints[wp_idx]) - pos) / env.step_scale
    d = d / max(1.0, np.max(np.abs(d)))
    return np.clip(d + noise * rng.standard_normal(2), -1.0, 1.0), wp_idx


def _maze_routes(env: PointMaze2D, rng, n, k, noise, seed) -> Dataset:
    routes = env.routes(k)
    S, A, R, S2, D = [], [], [], [], []
    while len(S) < n:
        s = env.reset(rng)
        route = routes[rng.integers(0, len(routes))]
        wp = 0
        for _ in range(env.max_steps):
            a, wp = scripted_action(env, s, route, wp, rng, noise)
            s2, r, done = env.step(a)
            S.append(s); A.append(a); R.append(r); S2.append(s2); D.append(r > 0)
            s = s2
            if done or len(S) >= n:
                break
    return Dataset(np.array(S), np.array(A), np.array(R), np.array(S2), np.array(D), env.name, seed)


def episode_success_rate(dataset: Dataset) -> float:
    """Fraction of recorded maze episodes that reached the goal (episodes split on resets)."""
    starts = np.flatnonzero(np.r_[True, np.any(dataset.s[1:] != dataset.s_next[:-1], axis=1)])
    ends = np.r_[starts[1:], len(dataset)]
    hits = [dataset.r[a:b].max() > 0 for a, b in zip(starts, ends)]
    return float(np.mean(hits))


# ---------------------------------------------------------------------------
# file format


def _record_dtype(S, A):
    return np.dtype([("s", "<f8", (S,)), ("a", "<f8", (A,)), ("r", "<f8"),
                     ("s_next", "<f8", (S,)), ("done", "u1")])


def write_dataset(path, ds: Dataset) -> None:
    """One JSON manifest line, then ``n`` packed little-endian records."""
    S, A = ds.state_dim, ds.action_dim
    rec = np.zeros(len(ds), dtype=_record_dtype(S, A))
    rec["s"], rec["a"], rec["r"], rec["s_next"], rec["done"] = ds.s, ds.a, ds.r, ds.s_next, ds.done
    manifest = {"version": FORMAT_VERSION, "S": S, "A": A, "n": len(ds),
                "env_name": ds.env_name, "seed": ds.seed}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode() + b"\n")
        fh.write(rec.tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    m = json.loads(head)
    if m.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {m.get('version')}")
    rec = np.frombuffer(body, dtype=_record_dtype(m["S"], m["A"]), count=m["n"])
    return Dataset(rec["s"].copy(), rec["a"].copy(), rec["r"].copy(), rec["s_next"].copy(),
                   rec["done"].astype(bool), m["env_name"], m["seed"])


def export_csv(ds: Dataset, path) -> None:
    S, A = ds.state_dim, ds.action_dim
    header = ([f"s{i}" for i in range(S)] + [f"a{i}" for i in range(A)] + ["r"]
              + [f"s_next{i}" for i in range(S)] + ["done"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            w.writerow([repr(float(x)) for x in ds.s[i]] + [repr(float(x)) for x in ds.a[i]]
                       + [repr(float(ds.r[i]))] + [repr(float(x)) for x in ds.s_next[i]]
                       + [int(ds.done[i])])
