"""Numeric kernels: parameter storage, affine/softmax/loss primitives, Adam,
dropout and a central-difference gradient checker.

Tensors are plain ``numpy.float64`` arrays. Every differentiable primitive has
a matching ``*_backward`` function taking the upstream gradient.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigurationError, ContractViolation, DimensionError, TrainingDiverged

PROB_FLOOR = 1e-12
PROB_CEIL = 1.0 - 1e-12

LOSS_MODES = ("categorical", "binary")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``seed`` and an optional stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


class ParamStore:
    """Ordered name -> (value, gradient) mapping."""

    def __init__(self):
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        self._grads: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64, copy=True)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def set_value(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise DimensionError(
                f"parameter {name!r} has shape {self._values[name].shape}, got {arr.shape}"
            )
        self._values[name][...] = arr

    def accumulate(self, name: str, g) -> None:
        self._grads[name] += g

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def num_elements(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self._values.items():
            out.add(name, v)
            out._grads[name][...] = self._grads[name]
        return out

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: v.shape for name, v in self._values.items()}

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            self[n].shape == other[n].shape and np.array_equal(self[n], other[n]) for n in self
        )


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ W + b`` over the last axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.ndim != 1 or x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(
            f"affine: x{tuple(x.shape)} @ W{tuple(W.shape)} + b{tuple(b.shape)} do not agree"
        )
    # strided (e.g. time-reversed) operands miss the BLAS path
    return np.ascontiguousarray(x) @ W + b


def affine_backward(x: np.ndarray, W: np.ndarray, dout: np.ndarray):
    """Returns ``(dx, dW, db)`` for :func:`affine`."""
    dout = np.ascontiguousarray(dout)
    dx = dout @ W.T
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dx, x2.T @ d2, d2.sum(axis=0)


def sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def softmax(v: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise DimensionError("softmax needs at least one element")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_mode(mode: str) -> None:
    if mode not in LOSS_MODES:
        raise ConfigurationError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")


def weighted_cross_entropy(yhat, y_index: int, phi: float, mode: str = "categorical") -> float:
    """Weighted cross-entropy of one probability vector against a one-hot target.

    ``categorical`` gives ``phi * -log yhat[y]``; ``binary`` sums the per-coordinate
    binary cross-entropy over all D entries. Probabilities are clamped to
    ``[1e-12, 1 - 1e-12]`` before the log.
    """
    _check_mode(mode)
    yhat = np.asarray(yhat, dtype=np.float64)
    if yhat.ndim != 1 or yhat.size == 0:
        raise DimensionError(f"expected a non-empty probability vector, got shape {yhat.shape}")
    if abs(yhat.sum() - 1.0) > 1e-6 or (yhat < 0).any():
        raise ContractViolation(f"input is not a probability vector (sum={yhat.sum()!r})")
    if not 0 <= y_index < yhat.size:
        raise DimensionError(f"target index {y_index} outside [0, {yhat.size})")
    if phi <= 0:
        raise ContractViolation(f"loss weight must be positive, got {phi}")
    p = np.clip(yhat, PROB_FLOOR, PROB_CEIL)
    if mode == "categorical":
        return float(phi * -math.log(p[y_index]))
    onehot = np.zeros_like(p)
    onehot[y_index] = 1.0
    return float(phi * -(onehot * np.log(p) + (1 - onehot) * np.log1p(-p)).sum())


def sequence_loss(logits: np.ndarray, targets: np.ndarray, phi: np.ndarray,
                  mode: str = "categorical", mask: np.ndarray | None = None):
    """Loss and logit gradient for a batch of decoded sequences.

    logits: (B, S, D); targets: (B, S) int; phi: (B, S) per-position weights.
    Each item's loss is the weighted sum over its positions divided by its number
    of counted positions; the batch loss is the mean over items.
    Returns ``(loss, dlogits, probs)``.
    """
    _check_mode(mode)
    B, S, D = logits.shape
    probs = softmax(logits)
    if mask is None:
        mask = np.ones((B, S))
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ContractViolation("every item needs at least one counted target position")
    w = phi * mask / counts / B  # (B, S)
    bi, si = np.indices((B, S))
    p = np.clip(probs, PROB_FLOOR, PROB_CEIL)
    inside = (probs > PROB_FLOOR) & (probs < PROB_CEIL)
    onehot = np.zeros_like(probs)
    onehot[bi, si, targets] = 1.0
    if mode == "categorical":
        loss = float((w * -np.log(p[bi, si, targets])).sum())
        # clamped probabilities are locally constant, so their gradient vanishes
        hit = inside[bi, si, targets]
        dlogits = (w * hit)[..., None] * (probs - onehot)
    else:
        per = -(onehot * np.log(p) + (1 - onehot) * np.log1p(-p)).sum(axis=-1)
        loss = float((w * per).sum())
        dp = np.where(inside, -onehot / p + (1 - onehot) / (1 - p), 0.0) * w[..., None]
        dlogits = probs * (dp - (probs * dp).sum(axis=-1, keepdims=True))
    return loss, dlogits, probs


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for name in params:
        g = params.grad(name)
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in params:
        g = params.grad(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name][...] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    params.zero_grad()


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x: np.ndarray, p: float, rng_seed, training: bool) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    x = np.asarray(x, dtype=np.float64)
    if not training or p == 0.0:
        return x.copy()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(rng_seed)
    return x * dropout_mask(x.shape, p, rng)


def grad_check(loss_fn: Callable[[ParamStore], float], params: ParamStore,
               epsilon: float = 1e-5, floor: float = 1e-10,
               value_fn: Callable[[ParamStore], float] | None = None) -> float:
    """Worst per-tensor relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return the loss and write analytic gradients into
    ``params`` (grads are zeroed before each call). The error for one tensor is
    ``|a - n|_2 / max(|a|_2, |n|_2, floor)``. ``value_fn``, when given, must
    compute the same loss without gradients and is used for the perturbed
    evaluations.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ConfigurationError(f"epsilon must lie in [1e-6, 1e-4], got {epsilon}")
    params.zero_grad()
    base = loss_fn(params)
    analytic = {n: params.grad(n).copy() for n in params}
    params.zero_grad()
    again = loss_fn(params)
    if again != base or any(not np.array_equal(analytic[n], params.grad(n)) for n in params):
        raise ContractViolation("loss function is not deterministic")
    if value_fn is None:
        def evaluate(p):
            p.zero_grad()
            return loss_fn(p)
    else:
        evaluate = value_fn
        if value_fn(params) != base:
            raise ContractViolation("value_fn disagrees with loss_fn at the base point")
    worst = 0.0
    for name in params:
        value = params[name]
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = evaluate(params)
            flat[i] = old - epsilon
            down = evaluate(params)
            flat[i] = old
            nflat[i] = (up - down) / (2 * epsilon)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    params.zero_grad()
    for name in params:
        params.grad(name)[...] = analytic[name]
    return worst
