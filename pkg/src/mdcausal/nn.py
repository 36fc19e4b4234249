"""Small dense networks with hand-written backpropagation and Adam.

Everything runs in float64. Networks are plain lists of affine layers with
either a ``tanh`` or an ``identity`` activation; gradients are obtained by
calling :meth:`DenseNetwork.backward` on the cache returned by
:meth:`DenseNetwork.forward_cached`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "identity")
LOG_2PI = math.log(2.0 * math.pi)
FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces inf/nan."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight must be (out, in) and bias (out,)")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class DenseNetwork:
    """Feed-forward stack of affine layers.

    Args:
        layers: Layers applied in order. Output width of each layer must match
            the input width of the next.
    """

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise ValueError(
                    f"layer {k} outputs {layers[k].out_dim} but layer {k + 1} "
                    f"expects {layers[k + 1].in_dim}"
                )
        self.layers = list(layers)

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator | int | None = None,
        hidden_activation: str = "tanh",
        output_activation: str = "identity",
    ) -> "DenseNetwork":
        """Glorot-uniform weights, zero biases.

        ``sizes`` lists every width including input and output, so
        ``[p, 128, 2 * d]`` is a one-hidden-layer network.
        """
        rng = np.random.default_rng(rng)
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            act = output_activation if k == len(sizes) - 2 else hidden_activation
            layers.append(
                Layer(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out), act)
            )
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Weight and bias arrays, in layer order. Mutating them mutates the net."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"expected input of width {self.input_dim}, got shape {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("network input contains non-finite values")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Forward pass that also returns what :meth:`backward` needs."""
        h = self._check_input(x)
        cache = []
        for k, layer in enumerate(self.layers):
            a = h @ layer.weight.T + layer.bias
            out = np.tanh(a) if layer.activation == "tanh" else a
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(f"non-finite activations in layer {k}")
            cache.append((h, out))
            h = out
        return h, cache

    def backward(
        self, cache: list, grad_output: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Reverse-mode pass.

        Args:
            cache: Second return value of :meth:`forward_cached`.
            grad_output: Gradient of a scalar loss w.r.t. the network output,
                same shape as the output.

        Returns:
            ``(grads, grad_input)`` where ``grads`` is aligned with
            :meth:`parameters`.
        """
        g = np.asarray(grad_output, dtype=np.float64)
        grads: list[np.ndarray] = []
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            h_in, out = cache[k]
            if layer.activation == "tanh":
                g = g * (1.0 - out * out)
            dw = g.T @ h_in
            db = g.sum(axis=0)
            if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                raise NonFiniteError(f"non-finite gradient in layer {k}")
            grads[:0] = [dw, db]
            g = g @ layer.weight
        return grads, g

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "in": l.in_dim,
                    "out": l.out_dim,
                    "activation": l.activation,
                    "weight": l.weight.ravel().tolist(),
                    "bias": l.bias.tolist(),
                }
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNetwork":
        layers = []
        for spec in data["layers"]:
            w = np.array(spec["weight"], dtype=np.float64).reshape(spec["out"], spec["in"])
            layers.append(Layer(w, np.array(spec["bias"], dtype=np.float64), spec["activation"]))
        return cls(layers)


@dataclass
class GaussianHead:
    """Diagonal Gaussian with clamped log-variance."""

    mean: np.ndarray
    log_variance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)

    @classmethod
    def from_output(
        cls, raw: np.ndarray, clamp: tuple[float, float] = (-10.0, 10.0)
    ) -> tuple["GaussianHead", np.ndarray]:
        """Split a ``(..., 2m)`` network output into mean and log-variance.

        Returns the head and a boolean array marking log-variance entries that
        were inside the clamp range (the gradient is zero elsewhere).
        """
        m = raw.shape[-1] // 2
        if raw.shape[-1] != 2 * m:
            raise ValueError("gaussian head needs an even number of outputs")
        lv_raw = raw[..., m:]
        inside = (lv_raw >= clamp[0]) & (lv_raw <= clamp[1])
        return cls(raw[..., :m], np.clip(lv_raw, *clamp)), inside


def gaussian_log_prob(x, mean, log_variance) -> np.ndarray:
    """Elementwise log N(x; mean, exp(log_variance))."""
    return -0.5 * (LOG_2PI + log_variance + (x - mean) ** 2 * np.exp(-log_variance))


def gaussian_log_density(x, head: GaussianHead) -> float:
    """log density of a diagonal Gaussian at ``x`` (sum over coordinates)."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(head.mean, dtype=np.float64)
    lv = np.asarray(head.log_variance, dtype=np.float64)
    if x.shape != mean.shape or lv.shape != mean.shape:
        raise ValueError("x, mean and log_variance must have the same shape")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mean)) and np.all(np.isfinite(lv))):
        raise ValueError("gaussian_log_density needs finite inputs")
    return float(np.sum(gaussian_log_prob(x, mean, lv)))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place Adam update (descent direction: params -= ...).

    Moment buffers are created lazily on the first call.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_networks(path: str | Path, networks: dict[str, DenseNetwork], **extra) -> None:
    """Write networks plus JSON-serializable metadata to a versioned text file."""
    payload = {
        "format": "mdcausal-networks",
        "version": FORMAT_VERSION,
        "networks": {name: net.to_dict() for name, net in networks.items()},
        "extra": extra,
    }
    Path(path).write_text(json.dumps(payload))


def load_networks(path: str | Path) -> tuple[dict[str, DenseNetwork], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "mdcausal-networks":
        raise ValueError(f"{path} is not a network file")
    if payload.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network file version {payload.get('version')}")
    nets = {k: DenseNetwork.from_dict(v) for k, v in payload["networks"].items()}
    return nets, payload.get("extra", {})
