"""MLPs, the tanh-squashed Gaussian head, Adam, and weight serialization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, StructuralError, Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ATANH_LIMIT = 1.0 - 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG2 = math.log(2.0)

WEIGHTS_FORMAT = "novelsac.mlp"
WEIGHTS_VERSION = 1


@dataclass
class MlpParams:
    """Dense layers ``(weight [out, in], bias [out])``; tanh between layers."""

    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise StructuralError("need one bias per weight and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.data.ndim != 2 or b.data.shape != (w.shape[0],):
                raise StructuralError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise StructuralError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} emits "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, out_scale: float = 1.0) -> "MlpParams":
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(n_in)
            if i == len(sizes) - 2:
                bound *= out_scale
            weights.append(Tensor(rng.uniform(-bound, bound, (n_out, n_in)), requires_grad=True, name=f"w{i}"))
            biases.append(Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True, name=f"b{i}"))
        return cls(weights, biases)

    @property
    def in_size(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_size(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Tensor(w.data.copy(), requires_grad=True, name=w.name) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True, name=b.name) for b in self.biases],
        )

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dict(self) -> dict:
        return {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "activation": "tanh",
            "layers": [
                {
                    "shape": list(w.shape),
                    "weight": [float.hex(v) for v in w.data.ravel()],
                    "bias": [float.hex(v) for v in b.data.ravel()],
                }
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpParams":
        if doc.get("format") != WEIGHTS_FORMAT or doc.get("version") != WEIGHTS_VERSION:
            raise StructuralError(f"unsupported weights document {doc.get('format')!r} v{doc.get('version')}")
        weights, biases = [], []
        for i, layer in enumerate(doc["layers"]):
            n_out, n_in = layer["shape"]
            w = np.array([float.fromhex(v) for v in layer["weight"]]).reshape(n_out, n_in)
            b = np.array([float.fromhex(v) for v in layer["bias"]])
            weights.append(Tensor(w, requires_grad=True, name=f"w{i}"))
            biases.append(Tensor(b, requires_grad=True, name=f"b{i}"))
        return cls(weights, biases)


def mlp_forward(params: MlpParams, x, frozen: bool = False):
    """Run the MLP on a [batch, in] input.

    With ``frozen=True`` the weights enter as constants, so no gradient reaches
    them; gradient still flows into ``x`` if it is a tracked Tensor.  Frozen
    weights plus an ndarray input gives a plain ndarray result.
    """
    xv = ad.as_array(x)
    if xv.ndim != 2 or xv.shape[1] != params.in_size:
        raise StructuralError(f"input shape {xv.shape} does not match MLP input size {params.in_size}")
    if not np.all(np.isfinite(xv)):
        raise NumericError("non-finite MLP input")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if frozen:
            w, b = w.data, b.data
        h = ad.linear(h, w, b)
        if i < last:
            h = ad.tanh(h)
    return h


# squashed Gaussian

@dataclass
class GaussianTanhHead:
    """Per-row Gaussian in pre-squash space; ``log_std`` already clamped."""

    mean: object  # ndarray or Tensor, [batch, d]
    log_std: object

    @classmethod
    def from_output(cls, out, act_dim: int) -> "GaussianTanhHead":
        mean = out[:, :act_dim]
        log_std = ad.clip(out[:, act_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return cls(mean, log_std)

    @property
    def act_dim(self) -> int:
        return ad.as_array(self.mean).shape[-1]

    def greedy(self) -> np.ndarray:
        return np.tanh(ad.as_array(self.mean))


def log1m_tanh_sq(u):
    """log(1 - tanh(u)^2) without cancellation for large |u|."""
    # 2 * (log 2 - u - softplus(-2u)); symmetric in u
    return 2.0 * (LOG2 - u - ad.softplus(-2.0 * u))


def gaussian_tanh_sample(head: GaussianTanhHead, noise):
    """Reparameterized draw ``tanh(mean + exp(log_std) * noise)`` and its log density.

    Returns ``(action, log_prob)`` with ``log_prob`` summed over action
    dimensions (shape [batch]).  Gradient flows into mean and log_std when they
    are tracked.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != head.act_dim:
        raise StructuralError(f"noise dim {noise.shape[-1]} != action dim {head.act_dim}")
    u = head.mean + ad.exp(head.log_std) * noise
    action = ad.tanh(u)
    per_dim = (-0.5 * noise * noise - HALF_LOG_2PI) - head.log_std - log1m_tanh_sq(u)
    return action, ad.sum(per_dim, axis=-1)


def gaussian_tanh_log_prob(head: GaussianTanhHead, action):
    """Log density of ``action`` (in the open box) under the squashed Gaussian.

    Actions are clamped to +-(1 - 1e-6) before the inverse squash.
    """
    a = ad.clip(action, -ATANH_LIMIT, ATANH_LIMIT)
    u = ad.atanh(a)
    z = (u - head.mean) * ad.exp(-head.log_std)
    per_dim = (-0.5 * z * z - HALF_LOG_2PI) - head.log_std - log1m_tanh_sq(u)
    return ad.sum(per_dim, axis=-1)


# Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction.  Missing grads count as zero."""
    if len(params) != len(state.m):
        raise StructuralError("Adam state does not match parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i} ({p.name})")
        if state.m[i].shape != p.data.shape:
            raise StructuralError(f"Adam moment shape {state.m[i].shape} != param {p.data.shape}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class Optimizer:
    """Adam bound to a parameter list."""

    params: list[Tensor]
    lr: float = 3e-4
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.for_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr=self.lr)
