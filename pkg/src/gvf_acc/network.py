"""Small dense network with hand-written backpropagation.

All parameters live in one flat float64 vector; per-layer weight matrices
(shape ``(fan_in, fan_out)``, row-major) and bias vectors are views into it.
Gradients use the same flat layout, which keeps the optimizer trivial.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

FORMAT_NAME = "gvf-acc-model"
FORMAT_VERSION = 1

OUTPUT_ACTIVATIONS = ("sigmoid", "identity")


class ModelFormatError(ValueError):
    """Raised for unreadable or incompatible model files."""


def _sigmoid(z):
    # exp overflow for very negative z yields 1/inf = 0, which is the right limit.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def _layer_slices(layer_sizes: Sequence[int]) -> List[Tuple[slice, Tuple[int, int], slice]]:
    slices = []
    offset = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = slice(offset, offset + fan_in * fan_out)
        offset += fan_in * fan_out
        b = slice(offset, offset + fan_out)
        offset += fan_out
        slices.append((w, (fan_in, fan_out), b))
    return slices


def n_params(layer_sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


class DenseNet:
    """Feed-forward net: tanh hidden layers, scalar sigmoid or identity output."""

    def __init__(self, layer_sizes: Sequence[int], output_activation: str = "sigmoid",
                 params: Optional[np.ndarray] = None):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        if layer_sizes[-1] != 1:
            raise ValueError("output width must be 1")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")
        self.layer_sizes = layer_sizes
        self.output_activation = output_activation
        size = n_params(layer_sizes)
        if params is None:
            params = np.zeros(size)
        params = np.array(params, dtype=np.float64)
        if params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got shape {params.shape}")
        self.params = params
        self._slices = _layer_slices(layer_sizes)
        self._bind()

    def _bind(self):
        self.weights = [self.params[w].reshape(shape) for w, shape, _ in self._slices]
        self.biases = [self.params[b] for _, _, b in self._slices]

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], rng: np.random.Generator,
                   output_activation: str = "sigmoid") -> "DenseNet":
        """Uniform fan-in initialization, zero biases."""
        net = cls(layer_sizes, output_activation)
        for w in net.weights:
            bound = 1.0 / math.sqrt(w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
        return net

    @property
    def input_width(self) -> int:
        return self.layer_sizes[0]

    def copy(self) -> "DenseNet":
        return DenseNet(self.layer_sizes, self.output_activation, self.params.copy())

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_width:
            raise ValueError(f"input width {x.shape[-1]} does not match network input {self.input_width}")
        return x

    def _activations(self, X: np.ndarray):
        acts = [X]
        h = X
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        z = h @ self.weights[-1] + self.biases[-1]
        z = z[:, 0]
        q = _sigmoid(z) if self.output_activation == "sigmoid" else z
        return acts, q

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        if X.ndim != 2:
            raise ValueError("forward_batch expects a 2-D array")
        return self._activations(X)[1]

    def forward(self, x: np.ndarray) -> float:
        x = self._check(x)
        if x.ndim != 1:
            raise ValueError("forward expects a 1-D input")
        return float(self._activations(x[None, :])[1][0])

    def forward_cached(self, X: np.ndarray):
        """Batch forward pass that also returns the activations ``backprop`` needs."""
        X = self._check(X)
        acts, q = self._activations(X)
        return q, (acts, q)

    def backprop(self, cache, coef: np.ndarray) -> np.ndarray:
        """Flat gradient of ``sum_i coef_i * q(X_i)`` from a ``forward_cached`` cache."""
        acts, q = cache
        d = np.asarray(coef, dtype=np.float64)
        if self.output_activation == "sigmoid":
            d = d * q * (1.0 - q)
        d = d[:, None]
        grad = np.empty_like(self.params)
        for i in range(len(self.weights) - 1, -1, -1):
            w_sl, _, b_sl = self._slices[i]
            grad[w_sl] = (acts[i].T @ d).ravel()
            grad[b_sl] = d.sum(axis=0)
            if i > 0:
                d = (d @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return grad

    def weighted_gradient(self, X: np.ndarray, coef: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(sum_i coef_i * grad q(X_i), q(X))`` in the flat parameter layout."""
        q, cache = self.forward_cached(X)
        return self.backprop(cache, coef), q

    def backward(self, x: np.ndarray) -> np.ndarray:
        """Gradient of the scalar output with respect to every parameter (flat layout)."""
        x = self._check(x)
        if x.ndim != 1:
            raise ValueError("backward expects a 1-D input")
        return self.weighted_gradient(x[None, :], np.ones(1))[0]

    def unflatten(self, flat: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Split a flat parameter-shaped vector into per-layer (weights, bias)."""
        return [(flat[w].reshape(shape), flat[b]) for w, shape, b in self._slices]


@dataclass
class OptimizerState:
    """Adaptive-moment optimizer, or plain SGD with ``mode="sgd"``.

    Updates move parameters along ``+scale * grad``: callers pass
    TD-error-weighted gradients, so this is descent on the squared TD error.
    """

    n_params: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    mode: str = "adam"
    step_count: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decay rates must lie in [0, 1)")
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)

    @classmethod
    def for_net(cls, net: DenseNet, **kwargs) -> "OptimizerState":
        return cls(n_params=net.params.size, **kwargs)


def apply_update(net: DenseNet, opt: OptimizerState, grad: np.ndarray, scale: float = 1.0):
    """One in-place optimizer step; returns ``(net, opt)`` for chaining."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {net.params.shape}")
    if not np.all(np.isfinite(grad)) or not math.isfinite(scale):
        raise ValueError("non-finite gradient")
    opt.step_count += 1
    if opt.mode == "sgd":
        net.params += (opt.learning_rate * scale) * grad
        return net, opt
    g = grad * scale
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * g
    opt.v *= opt.beta2
    g *= g
    opt.v += (1.0 - opt.beta2) * g
    # Bias corrections folded into the step size and epsilon.
    c1 = 1.0 - opt.beta1 ** opt.step_count
    c2 = math.sqrt(1.0 - opt.beta2 ** opt.step_count)
    denom = np.sqrt(opt.v)
    denom += opt.epsilon * c2
    net.params += (opt.learning_rate * c2 / c1) * (opt.m / denom)
    return net, opt


def finite_difference_gradient(net: DenseNet, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``net.forward(x)``; independent of ``backward``."""
    probe = net.copy()
    grad = np.empty_like(probe.params)
    for i in range(probe.params.size):
        orig = probe.params[i]
        probe.params[i] = orig + h
        up = probe.forward(x)
        probe.params[i] = orig - h
        down = probe.forward(x)
        probe.params[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def dumps(net: DenseNet, meta: dict) -> str:
    doc: dict[str, Any] = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta,
        "layer_sizes": list(net.layer_sizes),
        "output_activation": net.output_activation,
        "layers": [
            {"weights": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }
    try:
        return json.dumps(doc, indent=1, allow_nan=False) + "\n"
    except ValueError as exc:
        raise ModelFormatError(f"cannot serialize non-finite parameters: {exc}") from exc


def loads(text: str | bytes) -> Tuple[DenseNet, dict]:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"not a {FORMAT_NAME} document (version {FORMAT_VERSION} expected)")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}, expected {FORMAT_VERSION}")
    try:
        sizes = [int(s) for s in doc["layer_sizes"]]
        flat = []
        for layer, (fan_in, fan_out) in zip(doc["layers"], zip(sizes[:-1], sizes[1:])):
            w, b = layer["weights"], layer["bias"]
            if len(w) != fan_in * fan_out or len(b) != fan_out:
                raise ModelFormatError("layer array length does not match layer sizes")
            flat.extend(w)
            flat.extend(b)
        if len(doc["layers"]) != len(sizes) - 1:
            raise ModelFormatError("layer count does not match layer sizes")
        net = DenseNet(sizes, doc["output_activation"], np.array(flat, dtype=np.float64))
        return net, doc["meta"]
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"model document missing field: {exc}") from exc


@dataclass
class GradCheckReport:
    trials: int
    max_relative_error: float
    worst_layer: Optional[int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def layer_of_param(layer_sizes: Sequence[int], index: int) -> int:
    for i, (w, _, b) in enumerate(_layer_slices(layer_sizes)):
        if w.start <= index < b.stop:
            return i
    raise IndexError(index)


def gradient_check(trials: int, seed: int = 0, tolerance: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare ``backward`` with central differences on random nets and inputs.

    Relative errors use ``floor`` as the smallest denominator so that
    near-zero gradient entries, where finite differences carry only
    round-off, are judged on absolute error instead.
    """
    rng = np.random.default_rng(seed)
    worst, worst_layer = 0.0, None
    for _ in range(trials):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 9))] + [int(rng.integers(2, 17)) for _ in range(depth)] + [1]
        net = DenseNet.initialize(sizes, rng, OUTPUT_ACTIVATIONS[int(rng.integers(2))])
        net.params += rng.normal(0.0, 0.1, size=net.params.size)
        x = rng.uniform(-1.0, 1.0, size=sizes[0])
        err = relative_error(net.backward(x), finite_difference_gradient(net, x), floor)
        k = int(np.argmax(err))
        if err[k] > worst or worst_layer is None:
            worst, worst_layer = float(err[k]), layer_of_param(sizes, k)
    return GradCheckReport(trials, worst, worst_layer, tolerance)
