"""Minimal fully-connected Q-network kernel: forward pass with an optional
dueling head, hand-derived backprop for the weighted Huber loss on chosen
actions, an adaptive-moment optimizer, and a versioned binary parameter
format.

Everything is float64 numpy; no autodiff framework. The architecture is
fixed (rectified-linear trunk, linear head or value/advantage pair), so
the backward pass is written out explicitly and checked against finite
differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"VGQN"
_VERSION = 1


class ParameterFileError(Exception):
    """Corrupt, truncated, or incompatible parameter file."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    n_actions: int
    dueling: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.n_actions < 1:
            raise ValueError("dimensions must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "n_actions": self.n_actions, "dueling": self.dueling}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(input_dim=int(d["input_dim"]),
                   hidden=tuple(int(h) for h in d["hidden"]),
                   n_actions=int(d["n_actions"]),
                   dueling=bool(d["dueling"]))


class Parameters:
    """Weight/bias arrays for one network: a shared trunk plus either a
    single linear output layer or dueling value/advantage heads."""

    def __init__(self, spec: MlpSpec, arrays: list[np.ndarray]):
        self.spec = spec
        self.arrays = arrays      # flat list in canonical order

    @classmethod
    def shapes(cls, spec: MlpSpec) -> list[tuple[int, ...]]:
        dims = [spec.input_dim, *spec.hidden]
        out: list[tuple[int, ...]] = []
        for a, b in zip(dims, dims[1:]):
            out += [(a, b), (b,)]
        last = dims[-1]
        if spec.dueling:
            out += [(last, 1), (1,), (last, spec.n_actions), (spec.n_actions,)]
        else:
            out += [(last, spec.n_actions), (spec.n_actions,)]
        return out

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "Parameters":
        """Uniform fan-in initialization: each weight and its bias drawn
        from +-sqrt(1/fan_in)."""
        arrays = []
        for shape in cls.shapes(spec):
            if len(shape) == 2:
                bound = np.sqrt(1.0 / shape[0])
                arrays.append(rng.uniform(-bound, bound, shape))
            else:
                bound = np.sqrt(1.0 / arrays[-1].shape[0])
                arrays.append(rng.uniform(-bound, bound, shape))
        return cls(spec, arrays)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "Parameters":
        return cls(spec, [np.zeros(s) for s in cls.shapes(spec)])

    def copy(self) -> "Parameters":
        return Parameters(self.spec, [a.copy() for a in self.arrays])

    def copy_from(self, other: "Parameters") -> None:
        for mine, theirs in zip(self.arrays, other.arrays):
            mine[...] = theirs

    def equal(self, other: "Parameters") -> bool:
        return (self.spec == other.spec and
                all(np.array_equal(a, b)
                    for a, b in zip(self.arrays, other.arrays)))

    def _split(self):
        n_trunk = 2 * len(self.spec.hidden)
        trunk = [(self.arrays[i], self.arrays[i + 1])
                 for i in range(0, n_trunk, 2)]
        head = self.arrays[n_trunk:]
        return trunk, head


def forward(params: Parameters, x: np.ndarray) -> np.ndarray:
    """Q-values, shape (batch, n_actions). Dueling aggregation is
    Q = V + A - mean(A), which leaves Q invariant to a constant shift
    of the advantages."""
    q, _ = _forward_cached(params, np.atleast_2d(x))
    return q


def _forward_cached(params: Parameters, x: np.ndarray):
    trunk, head = params._split()
    h = x
    acts = [x]
    for w, b in trunk:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    if params.spec.dueling:
        wv, bv, wa, ba = head
        value = h @ wv + bv                      # (B, 1)
        adv = h @ wa + ba                        # (B, A)
        q = value + adv - adv.mean(axis=1, keepdims=True)
    else:
        wo, bo = head
        q = h @ wo + bo
    return q, acts


def backward(params: Parameters, x: np.ndarray, weights: np.ndarray,
             actions: np.ndarray, targets: np.ndarray):
    """Gradients of the weighted Huber loss between Q(s, chosen action)
    and the targets.

    loss = mean_i  w_i * huber(q_i - y_i),  huber threshold 1.0.

    Returns (grads, td_errors, loss); grads has the same array layout as
    params, td_errors are the raw q - y residuals (for priority updates).
    """
    x = np.atleast_2d(x)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(targets))):
        raise ValueError("non-finite inputs to backward")
    batch = x.shape[0]
    q, acts = _forward_cached(params, x)
    chosen = q[np.arange(batch), actions]
    err = chosen - targets
    loss = float(np.mean(weights * np.where(
        np.abs(err) <= 1.0, 0.5 * err ** 2, np.abs(err) - 0.5)))

    # d loss / d q_chosen; untouched actions get zero at the Q level.
    dchosen = weights * np.clip(err, -1.0, 1.0) / batch
    dq = np.zeros_like(q)
    dq[np.arange(batch), actions] = dchosen

    trunk, head = params._split()
    grads = [np.zeros_like(a) for a in params.arrays]
    n_trunk = 2 * len(params.spec.hidden)
    h = acts[-1]

    if params.spec.dueling:
        wv, bv, wa, ba = head
        dvalue = dq.sum(axis=1, keepdims=True)                 # (B, 1)
        dadv = dq - dq.mean(axis=1, keepdims=True)             # (B, A)
        grads[n_trunk + 0] = h.T @ dvalue
        grads[n_trunk + 1] = dvalue.sum(axis=0)
        grads[n_trunk + 2] = h.T @ dadv
        grads[n_trunk + 3] = dadv.sum(axis=0)
        dh = dvalue @ wv.T + dadv @ wa.T
    else:
        wo, bo = head
        grads[n_trunk + 0] = h.T @ dq
        grads[n_trunk + 1] = dq.sum(axis=0)
        dh = dq @ wo.T

    for layer in range(len(trunk) - 1, -1, -1):
        w, b = trunk[layer]
        pre_act = acts[layer + 1]          # post-relu output of this layer
        dh = dh * (pre_act > 0)
        grads[2 * layer] = acts[layer].T @ dh
        grads[2 * layer + 1] = dh.sum(axis=0)
        dh = dh @ w.T

    return Parameters(params.spec, grads), err, loss


class AdamState:
    """First/second moment accumulators with bias correction."""

    def __init__(self, params: Parameters, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros_like(a) for a in params.arrays]
        self.v = [np.zeros_like(a) for a in params.arrays]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0


def adam_step(params: Parameters, grads: Parameters, state: AdamState,
              learning_rate: float):
    """One adaptive-moment update, in place; returns (params, state)."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for a, g, m, v in zip(params.arrays, grads.arrays, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        a -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def save_params(params: Parameters, path) -> None:
    """Binary layout: magic, version (u32), header length (u32), JSON
    header carrying the architecture spec, then float64 little-endian
    layer blobs in canonical order."""
    header = json.dumps({"spec": params.spec.to_dict()}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(header)))
        f.write(header)
        for a in params.arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path, expect: MlpSpec | None = None) -> Parameters:
    """Inverse of save_params; verifies magic, version, completeness, and
    (when given) the expected architecture."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise ParameterFileError("not a parameter file (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != _VERSION:
        raise ParameterFileError(f"unsupported parameter file version {version}")
    if len(blob) < 12 + header_len:
        raise ParameterFileError("truncated parameter file header")
    try:
        header = json.loads(blob[12:12 + header_len])
        spec = MlpSpec.from_dict(header["spec"])
    except (ValueError, KeyError) as exc:
        raise ParameterFileError(f"corrupt parameter file header: {exc}") from exc
    if expect is not None and spec != expect:
        raise ParameterFileError(
            f"parameter file architecture {spec} does not match expected {expect}")
    shapes = Parameters.shapes(spec)
    need = sum(int(np.prod(s)) for s in shapes) * 8
    payload = blob[12 + header_len:]
    if len(payload) != need:
        raise ParameterFileError(
            f"truncated parameter file: expected {need} payload bytes, "
            f"got {len(payload)}")
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(
            payload, dtype="<f8", count=count, offset=offset
        ).reshape(shape).astype(np.float64))
        offset += count * 8
    return Parameters(spec, arrays)
