"""Adjoint recursions over SDE trajectories and the losses built on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import SdeTrajectory, sigma
from .nn import UsageError

BLOWUP = 1e6


@dataclass
class AdjointSequence:
    """``values[k]`` is the adjoint at ``grid.times[k]``; ``values[-1]`` is the boundary."""

    values: np.ndarray
    kind: str
    valid: np.ndarray
    # f_beta at (a_k, t_k) for every node, cached by the sweep for the matching loss
    beta_drift: np.ndarray | None = None

    @property
    def dropped(self) -> int:
        return int((~self.valid).sum())


def boundary_adjoint(critic, s, a1, tau: float, clip: bool = True):
    """``-tau * grad_a Qbar(s, a1)``, optionally clipped elementwise to ``[-1, 1]``."""
    _, grad = critic.q_and_action_grad(s, a1)
    g = -tau * grad
    if clip:
        g = np.clip(g, -1.0, 1.0)
    return g


def _drift_vjp(field, s, a, t, g):
    """``f(s,a,t)`` and ``[grad_a (2 f(s,a,t) - a/t)]^T g``."""
    out, g_a = field.action_vjp(s, a, t, g)
    return out, 2.0 * g_a - g / t


def _finite_rows(x):
    return np.isfinite(x).all(axis=-1) & (np.abs(x) <= BLOWUP).all(axis=-1)


def lean_adjoint(f_beta, traj: SdeTrajectory, g1) -> AdjointSequence:
    """Backward sweep through the behavior field only.

    ``g[t-h] = g[t] + h * VJP(grad_a (2 f_beta(s, a_t, t) - a_t / t), g[t])``, from
    ``t = 1`` down to the first node.
    """
    grid = traj.grid
    h = grid.h
    times = grid.times
    values = np.zeros_like(traj.states)
    valid = traj.valid & _finite_rows(np.asarray(g1))
    values[-1] = g1
    drift = np.zeros_like(traj.states)
    idx = np.flatnonzero(valid)
    s = traj.s[idx]
    for k in range(grid.T - 1, 0, -1):
        g = values[k, idx]
        drift[k, idx], step = _drift_vjp(f_beta, s, traj.states[k, idx], times[k], g)
        values[k - 1, idx] = g + h * step
        ok = _finite_rows(values[k - 1, idx])
        if not ok.all():
            valid[idx[~ok]] = False
            values[: k, idx[~ok]] = 0.0
            idx, s = idx[ok], s[ok]
    if idx.size:
        drift[0, idx] = f_beta(s, traj.states[0, idx], times[0])
    values[:, ~valid] = 0.0
    return AdjointSequence(values, "lean", valid, drift)


def basic_adjoint(f_theta, f_beta, traj: SdeTrajectory, g1) -> AdjointSequence:
    """Full adjoint: VJPs through ``f_theta`` plus the running-cost gradient.

    The running-cost term ``(2 / sigma_t^2) grad_a |f_theta - f_beta|^2`` is
    evaluated at the same node as the VJP.  It is absent at ``t = 1`` where the
    discrete running cost has no node (``sigma_1 = 0``).
    """
    grid = traj.grid
    h = grid.h
    times = grid.times
    values = np.zeros_like(traj.states)
    valid = traj.valid & _finite_rows(np.asarray(g1))
    values[-1] = g1
    drift = np.zeros_like(traj.states)
    idx = np.flatnonzero(valid)
    s = traj.s[idx]
    for k in range(grid.T - 1, 0, -1):
        t = times[k]
        g = values[k, idx]
        a = traj.states[k, idx]
        f_th, step = _drift_vjp(f_theta, s, a, t, g)
        if t < 1.0:
            f_be = f_beta(s, a, t)
            drift[k, idx] = f_be
            diff = f_th - f_be
            _, j_th = f_theta.action_vjp(s, a, t, diff)
            _, j_be = f_beta.action_vjp(s, a, t, diff)
            step = step + (2.0 / sigma(t) ** 2) * 2.0 * (j_th - j_be)
        values[k - 1, idx] = g + h * step
        ok = _finite_rows(values[k - 1, idx])
        if not ok.all():
            valid[idx[~ok]] = False
            idx, s = idx[ok], s[ok]
    if idx.size:
        drift[0, idx] = f_beta(s, traj.states[0, idx], times[0])
    values[:, ~valid] = 0.0
    return AdjointSequence(values, "basic", valid, drift)


def _node_batch(traj: SdeTrajectory, adj: AdjointSequence):
    if adj.values.shape != traj.states.shape:
        raise UsageError(
            f"adjoint {adj.values.shape} and trajectory {traj.states.shape} are misaligned"
        )
    valid = traj.valid & adj.valid
    idx = np.flatnonzero(valid)
    n_nodes = traj.grid.T - 1
    nodes = traj.grid.nodes
    a = traj.states[:n_nodes, idx].reshape(-1, traj.states.shape[-1])
    g = adj.values[:n_nodes, idx].reshape(-1, traj.states.shape[-1])
    t = np.repeat(nodes, idx.size)
    s = np.tile(traj.s[idx], (n_nodes, 1))
    f_b = None
    if adj.beta_drift is not None:
        f_b = adj.beta_drift[:n_nodes, idx].reshape(-1, traj.states.shape[-1])
    return s, a, t, g, f_b, idx.size


def matching_loss(f_theta, f_beta, traj: SdeTrajectory, adj: AdjointSequence):
    """Mean over nodes and trajectories of ``|2 (f_theta - f_beta)/sigma + sigma g|^2``.

    Only the explicit ``f_theta`` output carries gradient; the trajectory, the
    behavior field, ``sigma`` and the adjoint are constants.  Returns
    ``(loss, grads, n_used)``; ``grads`` is ``None`` when no trajectory is valid.
    """
    s, a, t, g, f_b, n_used = _node_batch(traj, adj)
    if n_used == 0:
        return float("nan"), None, 0
    sig = sigma(t)[:, None]
    if f_b is None:
        f_b = f_beta(s, a, t)
    f_t, tape = f_theta.forward(s, a, t)
    resid = 2.0 * (f_t - f_b) / sig + sig * g
    rows = resid.shape[0]
    loss = float(np.sum(resid**2) / rows)
    grads, _ = tape.backward(2.0 * resid * (2.0 / sig) / rows)
    return loss, grads, n_used


def am_loss(f_theta, f_beta, traj, adj):
    if adj.kind != "lean":
        raise UsageError("am_loss expects a lean adjoint sequence")
    return matching_loss(f_theta, f_beta, traj, adj)


def bam_loss(f_theta, f_beta, traj, adj):
    if adj.kind != "basic":
        raise UsageError("bam_loss expects a basic adjoint sequence")
    return matching_loss(f_theta, f_beta, traj, adj)


def soc_loss(f_theta, f_beta, s, grid, rng, critic, tau: float, n: int | None = None):
    """Discrete control objective with its gradient by back-propagation through the SDE.

    ``sum_k h (2/sigma_k^2) |f_theta - f_beta|^2 (a_k)  -  tau Q(s, a_1)``, averaged
    over trajectories.  Returns ``(loss, grads, traj)``.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if n is not None and s.shape[0] == 1:
        s = np.repeat(s, n, axis=0)
    n = s.shape[0]
    h = grid.h
    A = f_theta.action_dim
    a = rng.standard_normal((n, A))
    noises = rng.standard_normal((grid.T - 1, n, A))
    states = [a]
    records = []
    running = np.zeros(n)
    for k, t in enumerate(grid.nodes):
        f_t, tape_t = f_theta.forward(s, a, t)
        f_b, tape_b = _forward_any(f_beta, s, a, t)
        diff = f_t - f_b
        w = h * 2.0 / sigma(t) ** 2
        running += w * np.sum(diff**2, axis=1)
        records.append((t, tape_t, tape_b, diff, w))
        a = a + h * (2.0 * f_t - a / t) + np.sqrt(2.0 * h * (1.0 - t) / t) * noises[k]
        states.append(a)
    q, q_grad = critic.q_and_action_grad(s, a)
    loss = float(np.mean(running - tau * q))

    cot = -tau * q_grad / n
    total = None
    for t, tape_t, tape_b, diff, w in reversed(records):
        c_f = 2.0 * h * cot + w * 2.0 * diff / n
        g, ga_t = tape_t.backward(c_f)
        ga_b = tape_b(-w * 2.0 * diff / n)
        total = g if total is None else total.with_arrays(
            [x + y for x, y in zip(total.arrays(), g.arrays())]
        )
        cot = cot * (1.0 - h / t) + ga_t + ga_b
    traj = SdeTrajectory(grid, s, np.stack(states), noises)
    return loss, total, traj


def _forward_any(field, s, a, t):
    """Forward a field and return an action-VJP closure (works for analytic fields too)."""
    if hasattr(field, "forward"):
        out, tape = field.forward(s, a, t)
        return out, lambda cot: tape.backward(cot, param_grads=False)[1]
    out = field(s, a, t)
    return out, lambda cot: field.action_vjp(s, a, t, cot)[1]
