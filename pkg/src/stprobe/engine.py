"""Leaky integrate-and-fire network dynamics and hand-derived backward passes.

Three training regimes share one forward implementation:

* ``stbp``  -- full backpropagation through layers and time,
* ``sdbp``  -- forward dynamics intact, gradients confined to their own step,
* ``notd``  -- membrane carry removed from the forward pass as well, so every
  step is an independent feedforward evaluation.

Arrays inside a :class:`ForwardTrace` are time-major, ``(T, batch, width)``.
Public entry points take batch-major inputs ``(batch, T, channels)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import NonFiniteError, Rng64, check_finite

TEMPORAL_ON = "temporal_on"
TEMPORAL_OFF = "temporal_off"
ALGORITHMS = ("stbp", "sdbp", "notd")
SURROGATE_KINDS = ("rectangle", "triangle", "sigmoid", "multigaussian")


@dataclass(frozen=True)
class LifParams:
    decay: float = 0.98
    threshold: float = 0.5
    # drop the -decay*u*H(u) term of d u[t+1] / d u[t]
    detach_reset: bool = False

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")
        if not self.threshold > 0.0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")


def _normal_pdf(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))


@dataclass(frozen=True)
class Surrogate:
    """Pseudo-derivative of the Heaviside spike function.

    Only the parameters belonging to ``kind`` are read: ``a`` (rectangle
    width), ``gamma`` (triangle half-width), ``k`` (sigmoid slope), ``h`` and
    ``sigma`` (multi-Gaussian).
    """

    kind: str = "rectangle"
    a: float = 1.0
    gamma: float = 1.0
    k: float = 4.0
    h: float = 0.15
    sigma: float = 0.5

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        for name in ("a", "gamma", "k", "sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"surrogate parameter {name} must be positive")
        if self.h < 0:
            raise ValueError("surrogate parameter h must be non-negative")

    def __call__(self, x):
        x = np.asarray(x)
        if self.kind == "rectangle":
            return (np.abs(x) < self.a / 2).astype(x.dtype) / x.dtype.type(self.a)
        if self.kind == "triangle":
            g = self.gamma
            return np.maximum(0.0, 1.0 - np.abs(x) / g).astype(x.dtype) / x.dtype.type(g)
        if self.kind == "sigmoid":
            sg = _sigmoid(self.k * x)
            return (self.k * sg * (1.0 - sg)).astype(x.dtype)
        s, h = self.sigma, self.h
        out = (
            (1.0 + h) * _normal_pdf(x, 0.0, s)
            - h * _normal_pdf(x, s, 6.0 * s)
            - h * _normal_pdf(x, -s, 6.0 * s)
        )
        return out.astype(x.dtype)

    @property
    def has_primitive(self) -> bool:
        return self.kind in ("sigmoid", "triangle")

    def primitive(self, x):
        """Antiderivative rising from 0 to 1; its slope is ``self(x)``."""
        x = np.asarray(x)
        if self.kind == "sigmoid":
            return _sigmoid(self.k * x)
        if self.kind == "triangle":
            g = self.gamma
            lo = (x + g) ** 2 / (2 * g * g)
            hi = 1.0 - (g - x) ** 2 / (2 * g * g)
            out = np.where(x < 0, lo, hi)
            out = np.where(x <= -g, 0.0, out)
            return np.where(x >= g, 1.0, out).astype(x.dtype)
        raise ValueError(f"surrogate kind {self.kind!r} has no closed-form primitive")


def surrogate(u_minus_vth, spec: Surrogate):
    """Evaluate the surrogate spike derivative at ``u - V_th``."""
    return spec(u_minus_vth)


def _sigmoid(x):
    x = np.asarray(x)
    # split on sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LayerWeights:
    W: np.ndarray
    V: np.ndarray | None = None

    def __post_init__(self):
        if self.V is not None and self.V.shape != (self.W.shape[0],) * 2:
            raise ValueError(f"recurrent weights must be square over {self.W.shape[0]} units")


@dataclass
class Readout:
    """Non-spiking leaky integrator ``o[t] = decay * o[t-1] + W s_L[t]``."""

    W: np.ndarray
    decay: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("readout decay must lie in [0, 1]")


@dataclass
class Network:
    layers: list[LayerWeights]
    readout: Readout
    lif: LifParams = field(default_factory=LifParams)
    surrogate: Surrogate = field(default_factory=Surrogate)

    def __post_init__(self):
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.W.shape[1] != lower.W.shape[0]:
                raise ValueError("layer widths do not chain")
        if self.layers and self.readout.W.shape[1] != self.layers[-1].W.shape[0]:
            raise ValueError("readout width does not match the last hidden layer")
        recurrent = {layer.V is not None for layer in self.layers}
        if len(recurrent) > 1:
            raise ValueError("either every hidden layer is recurrent or none is")

    @property
    def recurrent(self) -> bool:
        return bool(self.layers) and self.layers[0].V is not None

    @property
    def n_inputs(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def n_classes(self) -> int:
        return self.readout.W.shape[0]

    @property
    def dtype(self):
        return self.readout.W.dtype

    def named_params(self) -> dict[str, np.ndarray]:
        """Parameter arrays by stable name (views, not copies)."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.W"] = layer.W
            if layer.V is not None:
                out[f"layers.{i}.V"] = layer.V
        out["readout.W"] = self.readout.W
        return out

    def copy(self) -> "Network":
        layers = [
            LayerWeights(l.W.copy(), None if l.V is None else l.V.copy()) for l in self.layers
        ]
        return Network(layers, Readout(self.readout.W.copy(), self.readout.decay),
                       self.lif, self.surrogate)


def init_network(
    n_inputs: int,
    hidden: list[int],
    n_classes: int,
    rng: Rng64,
    *,
    recurrent: bool = False,
    recurrent_init: str = "zero",
    lif: LifParams | None = None,
    surrogate: Surrogate | None = None,
    readout_decay: float = 1.0,
    dtype=np.float64,
) -> Network:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights drawn from ``rng``.

    Draw order: each layer's ``W`` (then ``V`` if drawn), then the readout.
    """
    if recurrent_init not in ("zero", "uniform"):
        raise ValueError(f"recurrent_init must be 'zero' or 'uniform', not {recurrent_init!r}")

    def draw(rows, cols):
        bound = 1.0 / math.sqrt(cols)
        return ((rng.uniform((rows, cols)) * 2.0 - 1.0) * bound).astype(dtype)

    layers = []
    fan_in = n_inputs
    for width in hidden:
        W = draw(width, fan_in)
        V = None
        if recurrent:
            V = draw(width, width) if recurrent_init == "uniform" else np.zeros((width, width), dtype)
        layers.append(LayerWeights(W, V))
        fan_in = width
    readout = Readout(draw(n_classes, fan_in), readout_decay)
    return Network(layers, readout, lif or LifParams(), surrogate or Surrogate())


@dataclass
class ForwardTrace:
    """Everything a backward pass needs from one forward evaluation."""

    net: Network
    inputs: np.ndarray          # (T, B, C)
    u: list[np.ndarray]         # per layer (T, B, n_l)
    s: list[np.ndarray]         # per layer (T, B, n_l)
    o: np.ndarray               # (T, B, classes)
    mode: str
    readout_decay: float
    smooth: bool = False

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def batch(self) -> int:
        return self.inputs.shape[1]


def _check_inputs(inputs, net: Network) -> np.ndarray:
    x = np.asarray(inputs)
    if x.ndim != 3:
        raise ValueError(f"inputs must be (batch, T, channels), got shape {x.shape}")
    if x.shape[2] != net.n_inputs:
        raise ValueError(f"network expects {net.n_inputs} input channels, got {x.shape[2]}")
    if x.shape[1] < 1:
        raise ValueError("sequence must contain at least one step")
    return check_finite(np.ascontiguousarray(x.transpose(1, 0, 2), dtype=net.dtype), "inputs")


def _run(inputs, net: Network, mode: str, smooth: bool) -> ForwardTrace:
    if mode not in (TEMPORAL_ON, TEMPORAL_OFF):
        raise ValueError(f"unknown mode {mode!r}")
    x = _check_inputs(inputs, net)
    T, B, _ = x.shape
    dtype = net.dtype
    lam = dtype.type(net.lif.decay)
    vth = dtype.type(net.lif.threshold)
    temporal = mode == TEMPORAL_ON
    if smooth and not net.surrogate.has_primitive:
        raise ValueError(f"smooth mode needs a surrogate with a primitive, got {net.surrogate.kind!r}")

    us, ss = [], []
    below = x
    for li, layer in enumerate(net.layers):
        n = layer.W.shape[0]
        current = below @ layer.W.T
        u = np.empty((T, B, n), dtype)
        s = np.empty((T, B, n), dtype)
        u_prev = np.zeros((B, n), dtype)
        s_prev = np.zeros((B, n), dtype)
        for t in range(T):
            if temporal:
                ut = lam * u_prev * (1 - s_prev) + current[t]
                if layer.V is not None:
                    ut += s_prev @ layer.V.T
            else:
                ut = current[t]
            if smooth:
                st = net.surrogate.primitive(ut - vth).astype(dtype)
            else:
                st = (ut >= vth).astype(dtype)
            u[t] = ut
            s[t] = st
            u_prev, s_prev = ut, st
        if not np.all(np.isfinite(u)):
            raise NonFiniteError(f"non-finite membrane potential in layer {li}")
        us.append(u)
        ss.append(s)
        below = s

    lam_out = net.readout.decay if temporal else 0.0
    z = below @ net.readout.W.T
    if lam_out == 1.0:
        o = np.cumsum(z, axis=0)
    elif lam_out == 0.0:
        o = z
    else:
        o = np.empty_like(z)
        acc = np.zeros_like(z[0])
        for t in range(T):
            acc = dtype.type(lam_out) * acc + z[t]
            o[t] = acc
    check_finite(o, "readout potential")
    return ForwardTrace(net, x, us, ss, o, mode, lam_out, smooth)


def lif_forward(inputs, net: Network, mode: str = TEMPORAL_ON) -> ForwardTrace:
    """Run the network with binary spikes (Heaviside with ``Theta(0) = 1``)."""
    # overflow surfaces as NonFiniteError once the layer finishes
    with np.errstate(over="ignore", invalid="ignore"):
        return _run(inputs, net, mode, smooth=False)


def smooth_forward(inputs, net: Network, mode: str = TEMPORAL_ON) -> ForwardTrace:
    """Same dynamics with the spike replaced by the surrogate's primitive.

    The backward passes are then exact derivatives of this forward map, which
    is what finite-difference checks rely on.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _run(inputs, net, mode, smooth=True)


def _loss_grads(trace: ForwardTrace, loss_grads) -> np.ndarray:
    g = np.asarray(loss_grads, dtype=trace.o.dtype)
    if g.shape == trace.o.shape[1:]:
        full = np.zeros_like(trace.o)
        full[-1] = g
        return full
    if g.shape != trace.o.shape:
        raise ValueError(f"loss gradient shape {g.shape} matches neither {trace.o.shape} "
                         f"nor {trace.o.shape[1:]}")
    return g


def _backward(trace: ForwardTrace, loss_grads, temporal: bool) -> dict[str, np.ndarray]:
    net = trace.net
    dtype = trace.o.dtype
    T = trace.steps
    lam = dtype.type(net.lif.decay)
    vth = dtype.type(net.lif.threshold)
    G = _loss_grads(trace, loss_grads)

    if temporal and trace.readout_decay != 0.0:
        d_o = np.empty_like(G)
        carry = np.zeros_like(G[0])
        for t in range(T - 1, -1, -1):
            carry = G[t] + dtype.type(trace.readout_decay) * carry
            d_o[t] = carry
    else:
        d_o = G

    grads: dict[str, np.ndarray] = {}
    top = trace.s[-1]
    grads["readout.W"] = _outer_sum(d_o, top)
    g_s = d_o @ net.readout.W

    for li in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[li]
        u, s = trace.u[li], trace.s[li]
        H = net.surrogate(u - vth)
        if temporal:
            delta = np.empty_like(u)
            d_next = None
            for t in range(T - 1, -1, -1):
                gs = g_s[t]
                if d_next is None:
                    d = gs * H[t]
                else:
                    if layer.V is not None:
                        gs = gs + d_next @ layer.V
                    if not net.lif.detach_reset:
                        gs = gs - lam * d_next * u[t]
                    d = gs * H[t] + lam * d_next * (1 - s[t])
                delta[t] = d
                d_next = d
        else:
            delta = g_s * H
        below = trace.s[li - 1] if li > 0 else trace.inputs
        grads[f"layers.{li}.W"] = _outer_sum(delta, below)
        if layer.V is not None:
            if trace.mode == TEMPORAL_OFF or T == 1:
                grads[f"layers.{li}.V"] = np.zeros_like(layer.V)
            else:
                grads[f"layers.{li}.V"] = _outer_sum(delta[1:], s[:-1])
        if li > 0:
            g_s = delta @ layer.W

    ordered = {name: grads[name] for name in net.named_params()}
    for name, g in ordered.items():
        check_finite(g, f"gradient {name}")
    return ordered


def _outer_sum(delta: np.ndarray, act: np.ndarray) -> np.ndarray:
    """sum over (t, b) of delta[t, b]^T act[t, b]."""
    return delta.reshape(-1, delta.shape[-1]).T @ act.reshape(-1, act.shape[-1])


def _require(trace: ForwardTrace, mode: str, who: str):
    if trace.mode != mode:
        raise ValueError(f"{who} needs a trace produced in {mode} mode, got {trace.mode}")


def backward_stbp(trace: ForwardTrace, loss_grads) -> dict[str, np.ndarray]:
    """Gradients through space and time.

    ``loss_grads`` is dL/do either per step ``(T, B, classes)`` or for the final
    step only ``(B, classes)``.
    """
    _require(trace, TEMPORAL_ON, "backward_stbp")
    return _backward(trace, loss_grads, temporal=True)


def backward_sdbp(trace: ForwardTrace, loss_grads) -> dict[str, np.ndarray]:
    """Gradients confined to the step they arise in.

    Nothing flows from step t to an earlier step: not through the membrane
    carry, the recurrent weights, or the readout integrator.
    """
    _require(trace, TEMPORAL_ON, "backward_sdbp")
    return _backward(trace, loss_grads, temporal=False)


def backward_notd(trace: ForwardTrace, loss_grads) -> dict[str, np.ndarray]:
    _require(trace, TEMPORAL_OFF, "backward_notd")
    return _backward(trace, loss_grads, temporal=False)


BACKWARD = {"stbp": backward_stbp, "sdbp": backward_sdbp, "notd": backward_notd}


def mode_for(algorithm: str) -> str:
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    return TEMPORAL_OFF if algorithm == "notd" else TEMPORAL_ON


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient ``(softmax - onehot) / batch``."""
    z = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError("logits must be (batch, classes) with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(z.shape[0])
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= z.shape[0]
    return loss, grad


def sequence_loss(trace: ForwardTrace, labels, per_step: bool):
    """Loss and dL/do for a trace.

    ``per_step=False`` scores the final readout only; ``per_step=True`` averages
    the cross-entropy of every step against the sequence label.
    """
    if not per_step:
        loss, g = softmax_xent(trace.o[-1], labels)
        return loss, g
    T, B, K = trace.o.shape
    loss, g = softmax_xent(trace.o.reshape(T * B, K), np.tile(labels, T))
    return loss, g.reshape(T, B, K)


AGGREGATIONS = ("mean", "max", "last")


def step_logits(trace: ForwardTrace, aggregation: str = "last") -> np.ndarray:
    """Collapse the per-step readout ``(T, B, K)`` to one logit row per sample.

    ``last`` takes the final step, ``mean`` averages over steps, ``max`` takes
    the step whose largest class logit is highest (the most confident frame).
    """
    o = trace.o
    if aggregation == "last":
        return o[-1]
    if aggregation == "mean":
        return o.mean(axis=0)
    if aggregation == "max":
        frame = o.max(axis=2).argmax(axis=0)
        return o[frame, np.arange(o.shape[1])]
    raise ValueError(f"unknown aggregation {aggregation!r}")
