"""Run configuration, offline and online training loops, evaluation and metrics files."""
from __future__ import annotations

import csv
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .agents import KINDS, AgentConfig, make_agent
from .critic import AnalyticCritic
from .data import Dataset, MixedSampler, ReplayBuffer, gen_dataset, read_dataset
from .envs import PointMaze2D, make_env
from .nn import ConfigurationError, load_checkpoint, save_checkpoint, seeded_rng

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"
COLLAPSE_WINDOW = 100


class TrainingCollapse(RuntimeError):
    """More than half of the recent actor updates were skipped for non-finite gradients."""


@dataclass
class RunConfig:
    kind: str = "qam"
    env: str = "point-maze"
    env_kwargs: dict = field(default_factory=dict)
    tau: float = 1.0
    rho: float = 0.5
    K: int = 10
    T: int = 10
    gamma: float = 0.99
    ema_rate: float = 5e-3
    alpha: float = 10.0
    sigma_a: float = 0.1
    guidance: float = 0.1
    batch_size: int = 256
    lr: float = 3e-4
    beta_lr: float | None = None
    hidden: tuple = (64, 64)
    activation: str = "gelu"
    boundary_clip: bool = True
    actor_grad_clip: float | None = 1.0
    std_mode: str = "sum"
    critic: str = "ensemble"
    warmup_steps: int = 0
    offline_steps: int = 20000
    online_steps: int = 10000
    buffer_capacity: int = 100000
    log_interval: int = 100
    eval_interval: int = 1000
    eval_episodes: int = 10
    seed: int = 0
    dataset: str | None = None
    dataset_size: int = 10000
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind must be one of {', '.join(KINDS)}, got {self.kind!r}")
        if self.tau < 0:
            raise ConfigurationError("tau must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in (0, 1)")
        if self.T < 2:
            raise ConfigurationError("T must be >= 2")
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if self.rho < 0 or self.sigma_a < 0:
            raise ConfigurationError("rho and sigma_a must be >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("batch_size and lr must be positive")
        for name in ("offline_steps", "online_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("log_interval", "eval_interval", "eval_episodes", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.critic not in ("ensemble", "analytic"):
            raise ConfigurationError("critic must be 'ensemble' or 'analytic'")
        if self.critic == "analytic" and self.env not in ("gauss-bandit", "bandit"):
            raise ConfigurationError("the analytic critic exists only for the Gaussian bandit")
        if self.dataset is not None and not Path(self.dataset).is_file():
            raise ConfigurationError(f"dataset {self.dataset} does not exist")
        try:
            make_env(self.env, **self.env_kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigurationError("config file must hold one JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# ---------------------------------------------------------------------------
# metrics


_CRITIC = ["critic_loss", "critic_grad_norm"]
_ACTOR = ["dropped", "actor_loss", "actor_grad_norm", "skipped"]
_BETA = ["beta_loss", "beta_grad_norm"]
_ONE_STEP = ["onestep_loss", "distill_mse"]
KIND_COLUMNS = {
    "qam": _CRITIC + _ACTOR + _BETA,
    "bam": _CRITIC + _ACTOR + _BETA,
    "qam-fql": _CRITIC + _ACTOR + _BETA + _ONE_STEP,
    "qam-edit": _CRITIC + _ACTOR + _BETA + ["edit_loss", "edit_entropy", "eta"],
    "fql": _CRITIC + _BETA + _ONE_STEP,
    "fawac": _CRITIC + ["value_loss", "actor_loss", "actor_grad_norm", "mean_weight"],
    "fbrac": _CRITIC + ["actor_loss", "actor_grad_norm", "skipped"],
    "cgql": _CRITIC + _BETA,
}
EVAL_COLUMNS = ["eval_return", "eval_ci_low", "eval_ci_high", "eval_success"]


def metric_columns(kind: str) -> list[str]:
    """Fixed CSV header for an agent kind."""
    return ["step", "wall_ms"] + KIND_COLUMNS[kind] + EVAL_COLUMNS


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsWriter:
    """Writes one CSV row per log or eval interval; the header is written on open."""

    def __init__(self, path, kind: str):
        self.columns = metric_columns(kind)
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(self.columns)
        self.start = time.perf_counter()
        self.last_step = -1

    def write(self, step: int, values: dict):
        if step < self.last_step:
            raise ValueError("metric rows must have nondecreasing step")
        self.last_step = step
        row = dict(values, step=step, wall_ms=round(1000 * (time.perf_counter() - self.start), 3))
        self.writer.writerow([_fmt(row.get(c)) for c in self.columns])
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV back into dicts of floats (``None`` for blanks)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in rows]


class _Accumulator:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, metrics: dict):
        for k, v in metrics.items():
            if v is None or not np.isfinite(v):
                continue
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
            self.counts[k] = self.counts.get(k, 0) + 1

    def flush(self) -> dict:
        out = {k: self.sums[k] / self.counts[k] for k in self.sums}
        self.sums, self.counts = {}, {}
        return out


class _CollapseGuard:
    def __init__(self, window=COLLAPSE_WINDOW):
        self.recent = deque(maxlen=window)

    def check(self, metrics: dict, step: int):
        if "skipped" not in metrics:
            return
        self.recent.append(bool(metrics["skipped"]))
        if len(self.recent) == self.recent.maxlen and sum(self.recent) > len(self.recent) / 2:
            raise TrainingCollapse(f"more than half of the last {len(self.recent)} updates skipped "
                                   f"(step {step})")


# ---------------------------------------------------------------------------
# construction


def build_env(config: RunConfig):
    return make_env(config.env, **config.env_kwargs)


def agent_config(config: RunConfig, env) -> AgentConfig:
    return AgentConfig(
        kind=config.kind, state_dim=env.state_dim, action_dim=env.action_dim, hidden=config.hidden,
        activation=config.activation, T=config.T, tau=config.tau, gamma=config.gamma, rho=config.rho,
        K=config.K, ema_rate=config.ema_rate, lr=config.lr, actor_grad_clip=config.actor_grad_clip,
        boundary_clip=config.boundary_clip, std_mode=config.std_mode, alpha=config.alpha,
        sigma_a=config.sigma_a, guidance=config.guidance, action_bound=env.action_bound,
        beta_lr=config.beta_lr, warmup_steps=config.warmup_steps,
    )


def build_agent(config: RunConfig, env):
    critic = None
    if config.critic == "analytic":
        critic = AnalyticCritic(env.b, env.C)
    return make_agent(agent_config(config, env), seeded_rng(config.seed, "init"), critic=critic)


def load_dataset(config: RunConfig, env) -> Dataset:
    if config.dataset is not None:
        return read_dataset(config.dataset)
    return gen_dataset(env, n=config.dataset_size, seed=config.seed)


def save_agent(path, agent, config: RunConfig, step: int):
    save_checkpoint(path, agent.nets(), {"config": config.to_dict(), "state": agent.state(), "step": step})


def load_agent(path, config: RunConfig | None = None):
    nets, extra = load_checkpoint(path)
    if config is None:
        config = RunConfig.from_dict(extra["config"])
    env = build_env(config)
    agent = build_agent(config, env)
    agent.load_nets(nets)
    agent.load_state(extra.get("state", {}))
    return agent, config, env


# ---------------------------------------------------------------------------
# evaluation


def _is_success(env, reward: float) -> bool:
    return isinstance(env, PointMaze2D) and reward > 0


def bootstrap_ci(values, rng, n_boot: int = 1000, level: float = 0.95) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 1 or np.all(values == values[0]):
        return float(values[0]), float(values[0])
    means = values[rng.integers(0, values.size, (n_boot, values.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def evaluate(agent, env, episodes: int, seed: int) -> dict:
    """Deterministic acting (``z = 0``) from fixed per-episode reset streams.

    Returns the mean undiscounted return, a 95% bootstrap CI and the success rate.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    returns, successes = [], []
    act_rng = seeded_rng(seed, "eval-act")
    for ep in range(episodes):
        s = env.reset(seeded_rng(seed, f"eval-{ep}"))
        total, success = 0.0, False
        while True:
            a = agent.act(s, act_rng, deterministic=True)
            s, r, done = env.step(a)
            total += r
            success = success or _is_success(env, r)
            if done:
                break
        returns.append(total)
        successes.append(float(success))
    lo, hi = bootstrap_ci(returns, seeded_rng(seed, "bootstrap"))
    return {"eval_return": float(np.mean(returns)), "eval_ci_low": lo, "eval_ci_high": hi,
            "eval_success": float(np.mean(successes))}


# ---------------------------------------------------------------------------
# training loops


def _terminal(env, reward: float, done: bool) -> bool:
    """Whether a transition ends the MDP (as opposed to hitting the step cap)."""
    if isinstance(env, PointMaze2D):
        return reward > 0
    return bool(done)


def run_offline(config: RunConfig) -> Path:
    """Offline training; writes ``metrics.csv`` and ``checkpoint.bin`` into ``out_dir``."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = build_env(config)
    data = load_dataset(config, env)
    agent = build_agent(config, env)
    rng = seeded_rng(config.seed, "train")
    writer = MetricsWriter(out / METRICS_NAME, config.kind)
    try:
        if config.warmup_steps and config.offline_steps:
            agent.pretrain_behavior(data, config.warmup_steps, seeded_rng(config.seed, "warmup"))
        _train(agent, config, env, data, rng, config.offline_steps, writer, step_env=None)
    finally:
        writer.close()
    save_agent(out / CHECKPOINT_NAME, agent, config, agent.steps)
    return out


def run_online(config: RunConfig, checkpoint) -> Path:
    """Fine-tune a checkpoint by interacting with the environment (UTD 1)."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agent, _, _ = load_agent(checkpoint, config)
    env = build_env(config)
    data = load_dataset(config, env)
    buffer = ReplayBuffer(env.state_dim, env.action_dim, config.buffer_capacity)
    sampler = MixedSampler(data, buffer)
    writer = MetricsWriter(out / METRICS_NAME, config.kind)
    try:
        writer.write(0, evaluate(agent, env, config.eval_episodes, config.seed))
        stepper = _EnvStepper(env, buffer, seeded_rng(config.seed, "env"), seeded_rng(config.seed, "act"))
        _train(agent, config, env, sampler, seeded_rng(config.seed, "online-train"), config.online_steps,
               writer, step_env=stepper)
    finally:
        writer.close()
    save_agent(out / CHECKPOINT_NAME, agent, config, agent.steps)
    return out


class _EnvStepper:
    def __init__(self, env, buffer, env_rng, act_rng):
        self.env, self.buffer = env, buffer
        self.env_rng, self.act_rng = env_rng, act_rng
        self.s = env.reset(env_rng)
        self.episode_return = 0.0
        self.returns: list[float] = []

    def __call__(self, agent):
        a = agent.act(self.s, self.act_rng)
        s2, r, done = self.env.step(a)
        self.buffer.add(self.s, np.clip(a, -1.0, 1.0) if self.env.action_bound else a, r, s2,
                        _terminal(self.env, r, done))
        self.episode_return += r
        self.s = s2
        if done:
            self.returns.append(self.episode_return)
            self.episode_return = 0.0
            self.s = self.env.reset(self.env_rng)


def _train(agent, config, env, data, rng, steps, writer, step_env=None):
    acc = _Accumulator()
    guard = _CollapseGuard()
    for i in range(1, steps + 1):
        if step_env is not None:
            step_env(agent)
        metrics = agent.update(data.sample(rng, config.batch_size), rng)
        guard.check(metrics, i)
        acc.add(metrics)
        do_eval = i % config.eval_interval == 0 or i == steps
        if i % config.log_interval == 0 or do_eval:
            row = acc.flush()
            if do_eval:
                row.update(evaluate(agent, env, config.eval_episodes, config.seed))
            writer.write(i, row)
