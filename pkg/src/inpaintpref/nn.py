"""Dense numerics: a tanh MLP with hand-written backprop, Adam, and a
finite-difference gradient checker.

Tensors are plain float64 numpy arrays. Every function accepts either a
single input vector of shape ``(input_dim,)`` or a batch ``(B, input_dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

ACTIVATIONS = ("tanh",)


@dataclass
class MlpParams:
    """Layer weights ``W[i]`` of shape (fan_in, fan_out) and biases ``b[i]``.

    Hidden layers apply tanh; the output layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: fan_in {w.shape[0]} != previous fan_out "
                    f"{self.weights[i - 1].shape[1]}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def arrays(self) -> list[np.ndarray]:
        """Parameters in storage order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], activation: str = "tanh") -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([a.copy() for a in self.arrays()], self.activation)

    def zeros_like(self) -> "MlpParams":
        return MlpParams.from_arrays([np.zeros_like(a) for a in self.arrays()], self.activation)

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def equals(self, other: "MlpParams") -> bool:
        """Bitwise equality."""
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def init_mlp(input_dim: int, hidden_dims: Sequence[int], output_dim: int,
             seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    dims = [input_dim, *hidden_dims, output_dim]
    if any(d < 1 for d in dims):
        raise ShapeError(f"all layer sizes must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.input_dim:
        raise ShapeError(
            f"input shape {x.shape} does not match network input_dim {params.input_dim}")
    return x


def mlp_forward_cached(params: MlpParams, x: np.ndarray):
    """Forward pass that also returns the per-layer activations for backprop."""
    x = _check_input(params, x)
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward_cached(params, x)[0]


def mlp_backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray,
                 cache: list[np.ndarray] | None = None):
    """Gradients of ``sum(upstream * mlp_forward(params, x))``.

    Returns ``(param_grads, input_grad)``; for a batch the parameter gradients
    are summed over the batch.
    """
    x = _check_input(params, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape[:-1] + (params.output_dim,):
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} does not match output "
            f"shape {x.shape[:-1] + (params.output_dim,)}")
    if cache is None:
        _, cache = mlp_forward_cached(params, x)
    batched = x.ndim == 2
    g = upstream
    gw: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    for i in range(len(params.weights) - 1, -1, -1):
        a_in = cache[i]
        if batched:
            gw[i] = a_in.T @ g
            gb[i] = g.sum(axis=0)
        else:
            gw[i] = np.outer(a_in, g)
            gb[i] = g.copy()
        g = g @ params.weights[i].T
        if i > 0:
            g = g * (1.0 - cache[i] ** 2)  # tanh'
    return MlpParams(gw, gb, params.activation), g


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr,
                         self.beta1, self.beta2, self.eps)


def adam_init(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``;
    the inputs are left untouched."""
    new_params, new_state = params.copy(), state.copy()
    adam_update_(new_state, new_params, grads)
    return new_params, new_state


def adam_update_(state: AdamState, params: MlpParams, grads: MlpParams) -> None:
    """In-place variant of :func:`adam_step` for training loops."""
    p_arrs, g_arrs = params.arrays(), grads.arrays()
    if [a.shape for a in p_arrs] != [a.shape for a in g_arrs]:
        raise ShapeError("gradient shapes do not mirror parameter shapes")
    for i, g in enumerate(g_arrs):
        if not np.isfinite(np.sum(g)):  # any inf/nan entry poisons the sum
            raise NonFiniteError(
                f"non-finite gradient in parameter array {i} at optimizer step {state.step}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(p_arrs, g_arrs, state.m.arrays(), state.v.arrays()):
        tmp = np.multiply(g, 1.0 - state.beta1)
        m *= state.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v *= state.beta2
        v += tmp
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        p -= tmp


def finite_difference_grads(f: Callable[[MlpParams], float], params: MlpParams,
                            h: float = 1e-5,
                            indices: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. parameter entries.

    ``indices`` maps an array position (in :meth:`MlpParams.arrays` order) to
    flat indices within it; by default every entry is perturbed. Returns the
    same mapping with derivative estimates.
    """
    arrays = params.arrays()
    if indices is None:
        indices = {k: np.arange(a.size) for k, a in enumerate(arrays)}
    out = {}
    for k, idx in indices.items():
        est = np.empty(len(idx))
        for j, flat_i in enumerate(idx):
            pert = [a.copy() for a in arrays]
            pert[k].flat[flat_i] += h
            up = f(MlpParams.from_arrays(pert, params.activation))
            pert[k].flat[flat_i] -= 2 * h
            down = f(MlpParams.from_arrays(pert, params.activation))
            est[j] = (up - down) / (2 * h)
        out[k] = est
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximized."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(f: Callable[[MlpParams], float], grads: MlpParams, params: MlpParams,
                    h: float = 1e-5, max_entries: int | None = None,
                    seed: int = 0) -> float:
    """Max relative error between ``grads`` and central differences of ``f``.

    With ``max_entries`` only a random subset of entries per array is checked.
    """
    indices = None
    if max_entries is not None:
        r = np.random.default_rng(seed)
        indices = {k: r.choice(a.size, size=min(a.size, max_entries), replace=False)
                   for k, a in enumerate(params.arrays())}
    numeric = finite_difference_grads(f, params, h, indices)
    g_arrays = grads.arrays()
    return max(max_relative_error(g_arrays[k].ravel()[idx], numeric[k])
               for k, idx in (indices or {k: np.arange(a.size)
                                          for k, a in enumerate(g_arrays)}).items())


@dataclass
class LossTrace:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)

    def moving_average(self, window: int) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return np.array([x.mean()]) if len(x) else x
        c = np.cumsum(np.insert(x, 0, 0.0))
        return (c[window:] - c[:-window]) / window


def mse_per_sample(params: MlpParams, inputs: np.ndarray, targets: np.ndarray,
                   weights=None, need_grads: bool = True):
    """Per-row mean squared error of the network output against ``targets``.

    Returns ``(losses, grads)`` where ``grads`` is the gradient of
    ``sum(weights * losses)`` (weights default to ones), or None when
    ``need_grads`` is false. ``weights`` may be a callable mapping the
    losses to weights, treated as constant for differentiation.
    """
    out, cache = mlp_forward_cached(params, inputs)
    if out.shape != np.shape(targets):
        raise ShapeError(f"network output {out.shape} vs target {np.shape(targets)}")
    resid = out - targets
    dim = resid.shape[-1]
    losses = np.mean(resid * resid, axis=-1)
    if not need_grads:
        return losses, None
    if callable(weights):
        weights = weights(losses)
    w = np.ones(losses.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    upstream = (2.0 / dim) * resid * (w[..., None] if resid.ndim == 2 else w)
    grads, _ = mlp_backward(params, inputs, upstream, cache)
    return losses, grads
