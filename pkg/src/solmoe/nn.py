"""Dense numeric kernels with hand-written backward passes.

Everything runs in float64. Forward functions are pure. Backward
functions accumulate into ``Param.grad`` buffers, so repeated calls sum
gradients until ``zero_grad`` is called. There is no autodiff graph: the
model that composes these kernels also composes their backwards, and
``grad_check`` verifies the composition against central differences.

Masking convention: a ``-inf`` entry means "removed before softmax".
``softmax`` maps ``-inf`` to an exact 0, so masked coordinates also get
an exact zero gradient from ``softmax_backward``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9


class ShapeMismatch(ValueError):
    pass


class AllMasked(ValueError):
    pass


class KTooLarge(ValueError):
    pass


class NotASimplex(ValueError):
    pass


class TargetOutOfRange(IndexError):
    pass


@dataclass
class Param:
    """A trainable tensor paired with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.array(self.grad, dtype=np.float64)
            if self.grad.shape != self.value.shape:
                raise ShapeMismatch(
                    f"grad shape {self.grad.shape} != value shape {self.value.shape}"
                )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def step(self, eta: float) -> None:
        self.value -= eta * self.grad

    def copy(self) -> "Param":
        return Param(self.value.copy(), self.grad.copy())


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector.

    ``-inf`` entries map to exactly 0. Raises AllMasked when every entry
    is ``-inf``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeMismatch(f"softmax expects a non-empty 1-D vector, got shape {v.shape}")
    m = v.max()
    if m == -np.inf:
        raise AllMasked("softmax input has no finite entry")
    e = np.exp(v - m)
    return e / e.sum()


def softmax_backward(out: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Gradient of softmax given its output ``out`` and upstream ``dout``."""
    return out * (dout - np.dot(out, dout))


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def topk_mask(v: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest entries verbatim, set the rest to ``-inf``.

    Ties break toward the lower index (stable selection).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatch(f"topk_mask expects a 1-D vector, got shape {v.shape}")
    if k < 1:
        raise KTooLarge(f"k must be a positive integer, got {k}")
    if k > v.size:
        raise KTooLarge(f"k={k} exceeds vector length {v.size}")
    keep = np.argsort(-v, kind="stable")[:k]
    out = np.full_like(v, -np.inf)
    out[keep] = v[keep]
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0.0)


def linear(x: np.ndarray, w: Param, b: Param) -> np.ndarray:
    """y = W x + b for a 1-D input x."""
    x = np.asarray(x, dtype=np.float64)
    if w.value.ndim != 2:
        raise ShapeMismatch(f"weight must be 2-D, got shape {w.value.shape}")
    m, n = w.value.shape
    if x.shape != (n,):
        raise ShapeMismatch(f"input shape {x.shape} incompatible with weight {w.value.shape}")
    if b.value.shape != (m,):
        raise ShapeMismatch(f"bias shape {b.value.shape} incompatible with weight {w.value.shape}")
    return w.value @ x + b.value


def linear_backward(dy: np.ndarray, x: np.ndarray, w: Param, b: Param) -> np.ndarray:
    """Accumulate dL/dW and dL/db, return dL/dx."""
    w.grad += np.outer(dy, x)
    b.grad += dy
    return w.value.T @ dy


def attention_forward(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention; returns (output, row-stochastic weights)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeMismatch(
            f"attention expects equal 2-D shapes, got {q.shape}, {k.shape}, {v.shape}"
        )
    d_h = q.shape[1]
    if d_h < 1:
        raise ShapeMismatch("attention head width must be at least 1")
    scores = q @ k.T / np.sqrt(d_h)
    weights = _softmax_rows(scores)
    return weights @ v, weights


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    return attention_forward(q, k, v)[0]


def attention_backward(
    dout: np.ndarray,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    weights: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of attention_forward; returns (dQ, dK, dV)."""
    dv = weights.T @ dout
    dw = dout @ v.T
    # row-wise softmax backward
    ds = weights * (dw - np.sum(dw * weights, axis=1, keepdims=True))
    scale = 1.0 / np.sqrt(q.shape[1])
    dq = ds @ k * scale
    dk = ds.T @ q * scale
    return dq, dk, dv


def cross_entropy(probs: np.ndarray, target: int) -> float:
    """Negative log probability of ``target`` under ``probs``.

    ``probs`` must lie on the simplex within 1e-9. The selected
    probability is floored at 1e-12 before the log.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ShapeMismatch(f"probs must be 1-D, got shape {probs.shape}")
    if abs(probs.sum() - 1.0) > SIMPLEX_TOL or probs.min() < -SIMPLEX_TOL:
        raise NotASimplex(f"probabilities do not form a simplex: {probs!r}")
    if not 0 <= target < probs.size:
        raise TargetOutOfRange(f"target {target} outside [0, {probs.size})")
    return float(-np.log(max(probs[target], PROB_FLOOR)))


def cross_entropy_backward(
    probs: np.ndarray, target: int, upstream: float = 1.0
) -> np.ndarray:
    """Gradient of cross_entropy w.r.t. ``probs`` (zero where the floor binds)."""
    d = np.zeros_like(np.asarray(probs, dtype=np.float64))
    p = probs[target]
    if p > PROB_FLOOR:
        d[target] = -upstream / p
    return d


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    step: float
    passed: bool
    n_coords: int
    worst: str


def grad_check(
    f: Callable[[], float],
    params: Mapping[str, Param] | Iterable[Param],
    step: float = 1e-3,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` must return the scalar loss and accumulate analytic gradients
    into the params' grad buffers when called. The checker zeroes all
    grads, calls ``f`` once to collect the analytic gradient, then
    perturbs every coordinate by ``+-step`` and compares. Relative error
    uses max(|analytic|, |numeric|, 1e-8) as the denominator.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, Mapping):
        items = list(params.items())
    else:
        items = [(str(i), p) for i, p in enumerate(params)]

    for _, p in items:
        p.zero_grad()
    f()
    analytic = {name: p.grad.copy() for name, p in items}

    max_rel = 0.0
    worst = ""
    n_coords = 0
    for name, p in items:
        flat = p.value.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            loss_plus = float(f())
            flat[i] = orig - step
            loss_minus = float(f())
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            rel = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{i}]"
            n_coords += 1
    for _, p in items:
        p.zero_grad()
    return GradCheckReport(
        max_rel_error=max_rel,
        tol=tol,
        step=step,
        passed=max_rel < tol,
        n_coords=n_coords,
        worst=worst,
    )
