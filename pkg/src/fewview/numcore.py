"""Minimal dense-network substrate.

Float64 numpy throughout. Networks are fixed stacks of dense layers over a
small activation vocabulary; a backward pass consumes the explicit cache
returned by the matching forward call, so shared read-only evaluation is safe
while a single training loop owns parameter mutation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, StateError

Array = np.ndarray

ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid")


def _activate(tag: str, z: Array) -> Array:
    if tag == "linear":
        return z
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {tag!r}")


def _activate_grad(tag: str, z: Array, y: Array) -> Array:
    # derivative w.r.t. pre-activation z; y is the activation output
    if tag == "linear":
        return np.ones_like(z)
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "tanh":
        return 1.0 - y * y
    if tag == "sigmoid":
        return y * (1.0 - y)
    raise ValueError(f"unknown activation {tag!r}")


def _require_finite(arr: Array, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: y = act(W x + b) with W of shape (out_dim, in_dim)."""

    in_dim: int
    out_dim: int
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class DenseNet:
    """A stack of dense layers with deterministic seeded initialization.

    Parameters are initialized uniformly in [-sqrt(1/fan_in), +sqrt(1/fan_in)].
    Inputs may be a single vector ``(in_dim,)`` or a batch ``(B, in_dim)``.
    """

    def __init__(self, specs: Sequence[LayerSpec], seed: int):
        specs = tuple(specs)
        if not specs:
            raise ShapeError("a DenseNet needs at least one layer")
        for prev, nxt in zip(specs, specs[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        self.specs = specs
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights: list[Array] = []
        self.biases: list[Array] = []
        for spec in specs:
            limit = np.sqrt(1.0 / spec.in_dim)
            self.weights.append(rng.uniform(-limit, limit, size=(spec.out_dim, spec.in_dim)))
            self.biases.append(rng.uniform(-limit, limit, size=spec.out_dim))

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def mac_count(self) -> int:
        """Multiply-accumulate count of one forward pass on a single input."""
        return sum(spec.in_dim * spec.out_dim for spec in self.specs)

    def named_params(self, prefix: str = "") -> list[tuple[str, Array]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}layer{i}.weight", w))
            out.append((f"{prefix}layer{i}.bias", b))
        return out

    def _check_input(self, x: Array) -> tuple[Array, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"input width {x.shape[-1] if x.ndim else 0} does not match "
                f"first layer width {self.in_dim}"
            )
        return x, single

    def forward(self, x: Array) -> Array:
        x2, single = self._check_input(x)
        for w, b, spec in zip(self.weights, self.biases, self.specs):
            x2 = _activate(spec.activation, x2 @ w.T + b)
        _require_finite(x2, "forward output")
        return x2[0] if single else x2

    def forward_cache(self, x: Array) -> tuple[Array, list]:
        """Forward pass that also returns the per-layer cache backward() needs."""
        x2, single = self._check_input(x)
        cache: list = [single]
        for w, b, spec in zip(self.weights, self.biases, self.specs):
            z = x2 @ w.T + b
            y = _activate(spec.activation, z)
            cache.append((x2, z, y))
            x2 = y
        _require_finite(x2, "forward output")
        return (x2[0] if single else x2), cache

    def backward(self, cache: list | None, grad_out: Array) -> tuple[dict[str, Array], Array]:
        """Backpropagate ``grad_out`` through a cached forward pass.

        Returns (parameter gradients keyed like named_params, gradient w.r.t.
        the forward input).
        """
        if cache is None or len(cache) != len(self.specs) + 1:
            raise StateError("backward needs the cache from a matching forward_cache call")
        single = cache[0]
        grad = np.asarray(grad_out, dtype=np.float64)
        if single:
            grad = grad[None, :]
        if grad.shape != cache[-1][2].shape:
            raise ShapeError(
                f"loss gradient shape {grad.shape} does not match output shape {cache[-1][2].shape}"
            )
        grads: dict[str, Array] = {}
        for i in range(len(self.specs) - 1, -1, -1):
            x_in, z, y = cache[i + 1]
            dz = grad * _activate_grad(self.specs[i].activation, z, y)
            grads[f"layer{i}.weight"] = dz.T @ x_in
            grads[f"layer{i}.bias"] = dz.sum(axis=0)
            grad = dz @ self.weights[i]
        for name, g in grads.items():
            _require_finite(g, f"gradient of {name}")
        _require_finite(grad, "input gradient")
        return grads, (grad[0] if single else grad)


def softmax(logits: Array) -> Array:
    """Row-wise softmax with max-subtraction for numerical stability."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Array, labels) -> tuple[float, Array]:
    """Cross-entropy loss for class logits.

    Accepts a single ``(C,)`` logit vector with an integer label, or a batch
    ``(B, C)`` with labels ``(B,)``; batch losses are averaged. Returns the
    scalar loss and the gradient w.r.t. the logits (``softmax - onehot``,
    divided by B in the batched case).
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
        labels = np.asarray([labels])
    else:
        labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range for {c} classes")
    probs = softmax(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    _require_finite(grad, "cross-entropy gradient")
    return loss, (grad[0] if single else grad)


def bev_mse(heatmap: Array, target: Array) -> tuple[float, Array]:
    """Mean squared error between an occupancy heatmap and its target.

    Zero exactly when the two arrays are equal. The gradient w.r.t. the
    heatmap is ``2 (heatmap - target) / size``.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if heatmap.shape != target.shape:
        raise ShapeError(f"heatmap shape {heatmap.shape} != target shape {target.shape}")
    diff = heatmap - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    _require_finite(grad, "bev loss gradient")
    return loss, grad


class Adam:
    """Adaptive-moment optimizer over a fixed set of named parameters.

    Holds references to the parameter arrays and updates them in place.
    Moment accumulators mirror parameter shapes exactly.
    """

    def __init__(
        self,
        named_params: Sequence[tuple[str, Array]],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._params = list(named_params)
        self._m = {name: np.zeros_like(p) for name, p in self._params}
        self._v = {name: np.zeros_like(p) for name, p in self._params}

    def step(self, grads: Mapping[str, Array]) -> None:
        for name, param in self._params:
            if name not in grads:
                raise KeyError(f"missing gradient for parameter {name!r}")
            g = grads[name]
            if g.shape != param.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {param.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        for name, param in self._params:
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def numeric_gradient(loss_fn: Callable[[], float], param: Array, step: float = 1e-5) -> Array:
    """Central finite differences of ``loss_fn`` w.r.t. ``param``, entry by entry.

    ``loss_fn`` must read ``param`` in place; it is restored after probing.
    This is the independent oracle for backward passes and never calls them.
    """
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn()
        flat[i] = orig - step
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: Array, numeric: Array, floor: float = 1e-6) -> float:
    """Worst-case elementwise relative error between two gradient arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError("gradient arrays must share a shape")
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
