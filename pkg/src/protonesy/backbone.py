"""Feed-forward feature extractor with hand-written reverse mode and AdamW."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"all layer widths must be positive: {self}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden + (self.output_dim,)


@dataclass
class ParamState:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    m_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        for name, ref in (("m_w", self.weights), ("m_b", self.biases), ("v_w", self.weights), ("v_b", self.biases)):
            if not getattr(self, name):
                setattr(self, name, [np.zeros_like(p) for p in ref])

    def copy(self) -> "ParamState":
        cp = lambda xs: [x.copy() for x in xs]  # noqa: E731
        return ParamState(cp(self.weights), cp(self.biases), cp(self.m_w), cp(self.m_b),
                          cp(self.v_w), cp(self.v_b), self.step)


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __add__(self, other: "Grads") -> "Grads":
        return Grads([a + b for a, b in zip(self.weights, other.weights)],
                     [a + b for a, b in zip(self.biases, other.biases)])

    def scaled(self, s: float) -> "Grads":
        return Grads([s * w for w in self.weights], [s * b for b in self.biases])


@dataclass
class Tape:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    squeeze: bool


def init_params(spec: MlpSpec) -> ParamState:
    """He-style uniform fan-in initialisation with zero biases."""
    rng = np.random.default_rng(spec.seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return ParamState(ws, bs)


def zero_grads(params: ParamState) -> Grads:
    return Grads([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


def forward(spec: MlpSpec, params: ParamState, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != spec.input_dim:
        raise ValueError(f"input dimension {h.shape[1]} does not match {spec.input_dim}")
    inputs, preacts = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w + b
        preacts.append(a)
        h = a if i == last else np.maximum(a, 0.0)
    return (h[0] if squeeze else h), Tape(inputs, preacts, squeeze)


def backward(spec: MlpSpec, params: ParamState, tape: Tape, grad_z) -> tuple[Grads, np.ndarray]:
    """Exact gradients of ``sum(grad_z * z)`` with respect to parameters and input."""
    g = np.asarray(grad_z, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if len(tape.preacts) != len(params.weights) or g.shape != tape.preacts[-1].shape:
        raise ValueError("tape does not match this network or gradient shape")
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * (tape.preacts[i] > 0.0)
        gw[i] = tape.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return Grads(gw, gb), (g[0] if tape.squeeze else g)


def adam_step(params: ParamState, grads: Grads, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> ParamState:
    """One bias-corrected Adam update with decoupled weight decay applied first."""
    t = params.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    decay = 1.0 - lr * weight_decay

    def update(p, m, v, g):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p = p * decay - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        return p, m, v

    out = replace(params, weights=[], biases=[], m_w=[], m_b=[], v_w=[], v_b=[], step=t)
    for p, m, v, g in zip(params.weights, params.m_w, params.v_w, grads.weights):
        p, m, v = update(p, m, v, g)
        out.weights.append(p)
        out.m_w.append(m)
        out.v_w.append(v)
    for p, m, v, g in zip(params.biases, params.m_b, params.v_b, grads.biases):
        p, m, v = update(p, m, v, g)
        out.biases.append(p)
        out.m_b.append(m)
        out.v_b.append(v)
    return out
