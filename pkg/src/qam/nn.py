"""Small dense networks with a hand-written reverse sweep.

Everything here works on float64 numpy arrays laid out as ``(batch, features)``.
A forward pass records a :class:`Tape`; calling :meth:`Tape.backward` with an
output cotangent returns the vector-Jacobian product for both the parameters
and the network input.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("gelu", "relu", "tanh", "identity")

_GELU_C = math.sqrt(2.0 / math.pi)


class ConfigurationError(ValueError):
    """Shapes or settings that cannot be composed."""


class DomainError(ValueError):
    """Numerically invalid input (non-finite values, bad precisions, ...)."""


class UsageError(RuntimeError):
    """API misuse, e.g. replaying a consumed tape."""


# ---------------------------------------------------------------------------
# activations


# In-place arithmetic below: these two functions dominate the run time of every
# sampler and loss, and temporaries cost more than the math.
def _gelu(z):
    u = z * z
    u *= 0.044715 * _GELU_C
    u += _GELU_C
    u *= z
    th = np.tanh(u, out=u)
    y = th + 1.0
    y *= z
    y *= 0.5
    return y, th


def _gelu_grad(z, th):
    # 0.5 (1 + th) + 0.5 z (1 - th^2) C (1 + 3k z^2)
    du = z * z
    du *= 3 * 0.044715 * _GELU_C
    du += _GELU_C
    du *= z
    sech2 = th * th
    np.subtract(1.0, sech2, out=sech2)
    du *= sech2
    du += th
    du += 1.0
    du *= 0.5
    return du


def _activate(kind, z):
    if kind == "gelu":
        return _gelu(z)
    if kind == "relu":
        return np.maximum(z, 0.0), None
    if kind == "tanh":
        y = np.tanh(z)
        return y, y
    if kind == "identity":
        return z, None
    raise ConfigurationError(f"unknown activation {kind!r}")


def _activate_vjp(kind, z, aux, cot):
    if kind == "gelu":
        d = _gelu_grad(z, aux)
        d *= cot
        return d
    if kind == "relu":
        return cot * (z > 0)
    if kind == "tanh":
        return cot * (1.0 - aux**2)
    return cot


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParameterSet:
    """Weights ``W[i]`` of shape ``(out, in)``, biases ``b[i]`` of shape ``(out,)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ConfigurationError("weights, biases and activations differ in length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"layer {i}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ParameterSet":
        return ParameterSet(list(arrays[0::2]), list(arrays[1::2]), list(self.activations))

    def copy(self) -> "ParameterSet":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "ParameterSet":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "ParameterSet":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i : i + a.size], dtype=np.float64).reshape(a.shape))
            i += a.size
        return self.with_arrays(out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def manifest(self) -> dict:
        return {
            "shapes": [list(w.shape) for w in self.weights],
            "activations": list(self.activations),
        }


def init_mlp(
    rng: np.random.Generator,
    in_dim: int,
    out_dim: int,
    hidden: Sequence[int] = (64, 64),
    activation: str = "gelu",
    final_scale: float = 1.0,
) -> ParameterSet:
    """LeCun-normal weights, zero biases, identity output layer."""
    dims = [in_dim, *hidden, out_dim]
    weights, biases, acts = [], [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.standard_normal((d_out, d_in)) / math.sqrt(d_in)
        if i == len(dims) - 2:
            w *= final_scale
        weights.append(w)
        biases.append(np.zeros(d_out))
        acts.append(activation if i < len(dims) - 2 else "identity")
    return ParameterSet(weights, biases, acts)


def tree_add(a: Sequence[np.ndarray], b: Sequence[np.ndarray], scale: float = 1.0):
    return [x + scale * y for x, y in zip(a, b)]


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Linear record of primitive ops from one forward pass.

    Each entry is ``(kind, vjp)`` where ``vjp(cot, grads)`` maps the cotangent
    of the op's output to the cotangent of its input and deposits parameter
    gradients into ``grads`` (a flat list mirroring ``ParameterSet.arrays()``).
    A tape supports exactly one reverse sweep.
    """

    def __init__(self, params: ParameterSet, output_shape: tuple[int, ...]):
        self.params = params
        self.output_shape = output_shape
        self.ops: list[tuple[str, Callable]] = []
        self.consumed = False

    def record(self, kind: str, vjp: Callable) -> None:
        self.ops.append((kind, vjp))

    def backward(self, cotangent, param_grads: bool = True) -> tuple[ParameterSet | None, np.ndarray]:
        """Reverse sweep; with ``param_grads=False`` only the input cotangent is formed."""
        if self.consumed:
            raise UsageError("tape already consumed by a reverse sweep")
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != self.output_shape:
            raise ConfigurationError(
                f"cotangent shape {cot.shape} does not match output {self.output_shape}"
            )
        self.consumed = True
        grads = [np.zeros_like(a) for a in self.params.arrays()] if param_grads else None
        for _, vjp in reversed(self.ops):
            cot = vjp(cot, grads)
        return (self.params.with_arrays(grads) if param_grads else None), cot


def mlp_forward(params: ParameterSet, x) -> tuple[np.ndarray, Tape]:
    """Run the network on ``x`` (``(n,)`` or ``(batch, n)``) and record a tape."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ConfigurationError(f"input shape {x.shape} vs network input {params.in_dim}")
    if not np.isfinite(x).all():
        raise DomainError("non-finite network input")

    out_rows = x.shape[0]
    tape = Tape(params, (params.out_dim,) if squeeze else (out_rows, params.out_dim))
    if squeeze:
        tape.record("reshape", lambda cot, grads: cot[0])

    h = x
    for i, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        tape.record("affine", _affine_vjp(i, w, h))
        z = h @ w.T + b
        h, aux = _activate(act, z)
        if act != "identity":
            tape.record(act, _act_vjp(act, z, aux))
    if squeeze:
        tape.record("squeeze", lambda cot, grads: np.asarray(cot)[None, :])
        h = h[0]
    return h, tape


def _affine_vjp(i, w, x):
    def vjp(cot, grads):
        if grads is not None:
            grads[2 * i] += cot.T @ x
            grads[2 * i + 1] += cot.sum(axis=0)
        return cot @ w

    return vjp


def _act_vjp(kind, z, aux):
    return lambda cot, grads: _activate_vjp(kind, z, aux, cot)


def backward(tape: Tape, output_cotangent) -> tuple[ParameterSet, np.ndarray]:
    return tape.backward(output_cotangent)


def mlp_apply(params: ParameterSet, x) -> np.ndarray:
    """Forward pass without recording (cheaper when no gradient is needed)."""
    h = np.asarray(x, dtype=np.float64)
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h, _ = _activate(act, h @ w.T + b)
    return h


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet, lr: float = 3e-4) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in params.arrays()],
            v=[np.zeros_like(a) for a in params.arrays()],
            lr=lr,
        )


def clip_by_global_norm(arrays: Sequence[np.ndarray], max_norm: float | None):
    norm = global_norm(arrays)
    if max_norm is None or norm <= max_norm:
        return list(arrays), norm
    scale = max_norm / norm
    return [a * scale for a in arrays], norm


def adam_step(
    state: AdamState,
    params: ParameterSet,
    grads: ParameterSet,
    max_global_norm: float | None = None,
) -> tuple[ParameterSet, AdamState, dict]:
    """One bias-corrected Adam update; non-finite gradients skip the step."""
    g = grads.arrays()
    if len(g) != len(state.m) or any(a.shape != b.shape for a, b in zip(g, state.m)):
        raise ConfigurationError("gradient shapes do not match optimizer state")
    if not all(np.isfinite(a).all() for a in g):
        new_state = AdamState(state.m, state.v, state.step, state.lr, state.beta1,
                              state.beta2, state.eps, state.skipped + 1)
        return params, new_state, {"skipped": True, "grad_norm": float("nan")}

    g, norm = clip_by_global_norm(g, max_global_norm)
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    m = [b1 * mi + (1 - b1) * gi for mi, gi in zip(state.m, g)]
    v = [b2 * vi + (1 - b2) * gi * gi for vi, gi in zip(state.v, g)]
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    new = [
        p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
        for p, mi, vi in zip(params.arrays(), m, v)
    ]
    new_state = AdamState(m, v, step, state.lr, b1, b2, state.eps, state.skipped)
    return params.with_arrays(new), new_state, {"skipped": False, "grad_norm": norm}


class Trainable:
    """A parameter set paired with its Adam state."""

    def __init__(self, params: ParameterSet, lr: float = 3e-4, max_grad_norm: float | None = None):
        self.params = params
        self.opt = AdamState.for_params(params, lr)
        self.max_grad_norm = max_grad_norm

    def apply_gradients(self, grads: ParameterSet) -> dict:
        self.params, self.opt, info = adam_step(self.opt, self.params, grads, self.max_grad_norm)
        return info


@dataclass
class EmaTracker:
    target: ParameterSet
    rate: float = 5e-3

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigurationError(f"EMA rate must lie in [0, 1], got {self.rate}")

    def update(self, online: ParameterSet) -> "EmaTracker":
        lam = self.rate
        src = online.arrays()
        dst = self.target.arrays()
        if any(a.shape != b.shape for a, b in zip(src, dst)):
            raise ConfigurationError("EMA target and online parameters differ in shape")
        self.target = self.target.with_arrays(
            [(1.0 - lam) * t + lam * o for t, o in zip(dst, src)]
        )
        return self


def ema_update(tracker: EmaTracker, online: ParameterSet) -> EmaTracker:
    return tracker.update(online)


# ---------------------------------------------------------------------------
# randomness


def seeded_rng(seed: int, stream: int | str = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``.

    String stream names are hashed with CRC32 so that named streams are stable
    across processes.
    """
    if isinstance(stream, str):
        stream = zlib.crc32(stream.encode())
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)])
    return np.random.Generator(np.random.Philox(key))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, nets: dict[str, ParameterSet], extra: dict | None = None) -> None:
    """JSON manifest line followed by little-endian float64 arrays in manifest order."""
    manifest = {"version": 1, "nets": {k: p.manifest() for k, p in nets.items()}}
    if extra:
        manifest["extra"] = extra
    blobs = [np.ascontiguousarray(a, dtype="<f8").tobytes() for p in nets.values() for a in p.arrays()]
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=False).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, ParameterSet], dict]:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    manifest = json.loads(head)
    nets, offset = {}, 0
    for name, entry in manifest["nets"].items():
        weights, biases = [], []
        for out_d, in_d in entry["shapes"]:
            n = out_d * in_d
            weights.append(np.frombuffer(body, "<f8", n, offset).reshape(out_d, in_d).astype(np.float64))
            offset += 8 * n
            biases.append(np.frombuffer(body, "<f8", out_d, offset).astype(np.float64))
            offset += 8 * out_d
        nets[name] = ParameterSet(weights, biases, list(entry["activations"]))
    if offset != len(body):
        raise ConfigurationError(f"checkpoint {path}: {len(body) - offset} trailing bytes")
    return nets, manifest.get("extra", {})
