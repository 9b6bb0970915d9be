"""Minimal reverse-mode differentiable core.

Every learnable piece of the model (encoder blocks, centroid offset and
gathering blocks, attention bottleneck, classifier) is built from the
operations in this module. Tensors are float64 numpy arrays; each operation
records its parents and a closure mapping the upstream gradient to one
gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into leaf tensors only.

The "convolutional" blocks of a point network act on an unordered set with
shared weights, so all of them are expressed here as :func:`linear` applied
along the point / structure axis.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Mapping, Sequence
from types import MappingProxyType
from typing import Any

import numpy as np

from .errors import (
    ClassRangeError,
    DimensionError,
    NumericError,
    OptimizerStateError,
)

logger = logging.getLogger(__name__)

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence[Array | None]]

# Adam hyper-parameters used by the training loop.
DEFAULT_LR = 0.0025
DEFAULT_WEIGHT_DECAY = 0.0005


class Tensor:
    """A differentiable value: float64 array, optional gradient, graph links."""

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def backward(self, grad: Array | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            raise OptimizerStateError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=np.float64)
            if seed.shape != self.shape:
                raise DimensionError(f"seed shape {seed.shape} != tensor shape {self.shape}")

        grads: dict[int, Array] = {id(self): seed}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(data: Array, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a custom differentiable operation.

    ``backward(g)`` must return one gradient (or None) per parent, each with
    that parent's shape.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` back down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{op}: non-finite input")


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


# ---------------------------------------------------------------------------
# Dense maps and activations
# ---------------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[..., j] = sum_a x[..., a] * W[a, j] + b[j]`` over the last axis of ``x``."""
    if W.ndim != 2 or x.ndim == 0 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: cannot map {x.shape} with weights {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match {W.shape[1]} outputs")
    fan_in, fan_out = W.shape
    out = x.data @ W.data
    if b is not None:
        out = out + b.data

    def backward(g: Array) -> tuple[Array, Array, Array | None]:
        rows = x.data.reshape(-1, fan_in)
        g_rows = g.reshape(-1, fan_out)
        gb = g_rows.sum(axis=0) if b is not None else None
        return g @ W.data.T, rows.T @ g_rows, gb

    parents = (x, W) if b is None else (x, W, b)
    return make_op(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    _check_finite(x, "relu")
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    _check_finite(x, "sigmoid")
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    _check_finite(x, "softmax")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return make_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------------------
# Reductions and shape plumbing
# ---------------------------------------------------------------------------


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; ties go to the lowest index, which alone receives gradient."""
    axis = _axis(x, axis)
    if x.shape[axis] == 0:
        raise DimensionError(f"max_reduce over empty axis {axis} of shape {x.shape}")
    winners = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, winners, axis=axis).squeeze(axis)

    def backward(g: Array) -> tuple[Array]:
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, winners, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_op(out, (x,), backward)


def sum_reduce(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return make_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))
    axis = _axis(x, axis)
    return make_op(
        x.data.sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape),),
    )


def mean(x: Tensor, axis: int) -> Tensor:
    axis = _axis(x, axis)
    n = x.shape[axis]
    if n == 0:
        raise DimensionError(f"mean over empty axis {axis}")
    return make_op(
        x.data.sum(axis=axis) / n,
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take_rows(x: Tensor, index: Array) -> Tensor:
    """Gather ``x[index]`` along the first axis; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.intp)
    if x.ndim == 0 or (index.size and (index.min() < 0 or index.max() >= x.shape[0])):
        raise DimensionError(f"take_rows: index out of range for {x.shape}")

    def backward(g: Array) -> tuple[Array]:
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make_op(x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of nothing")
    axis = _axis(tensors[0], axis)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from e
    cuts = np.cumsum(sizes)[:-1]
    return make_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack of nothing")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"stack: {e}") from e
    return make_op(
        out,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def one_hot(labels: Array, num_classes: int) -> Array:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ClassRangeError(f"labels must lie in [0, {num_classes}), got {labels.min()}..{labels.max()}")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, targets: Array) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``targets`` is either an ``[n, C]`` one-hot matrix or ``n`` integer labels.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, C] logits, got {logits.shape}")
    _check_finite(logits, "cross_entropy")
    n, num_classes = logits.shape
    targets = np.asarray(targets)
    y = one_hot(targets, num_classes) if targets.ndim == 1 else targets.astype(np.float64)
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} targets for {n} rows of logits")
    if y.shape[1] != num_classes:
        raise ClassRangeError(f"one-hot width {y.shape[1]} != {num_classes} classes")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
        raise ClassRangeError("targets must hold exactly one hot entry per row")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -(y * log_probs).sum() / n
    probs = np.exp(log_probs)
    return make_op(np.asarray(loss), (logits,), lambda g: (g * (probs - y) / n,))


# ---------------------------------------------------------------------------
# Parameters and optimisation
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    limit = np.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParamSet(Mapping[str, Tensor]):
    """Named trainable tensors plus their Adam moment buffers.

    Iteration order is insertion order, which fixes the checkpoint layout.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}
        self.step = 0

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def add(self, name: str, values: Any) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        tensor = Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self._params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)
        return tensor

    def add_linear(self, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
        """Register ``{prefix}.W`` (Glorot uniform) and ``{prefix}.b`` (zeros)."""
        self.add(f"{prefix}.W", glorot_uniform(rng, fan_in, fan_out))
        self.add(f"{prefix}.b", np.zeros(fan_out))

    def moments(self, name: str) -> tuple[Array, Array]:
        return self._m[name], self._v[name]

    def extend(self, name: str, extra: Array, axis: int = -1) -> None:
        """Append ``extra`` along ``axis``; existing values and moments are untouched."""
        tensor = self._params[name]
        extra = np.asarray(extra, dtype=np.float64)
        try:
            tensor.data = np.concatenate([tensor.data, extra], axis=axis)
        except ValueError as e:
            raise DimensionError(f"cannot extend {name} {tensor.shape} with {extra.shape}") from e
        pad = np.zeros_like(extra)
        self._m[name] = np.concatenate([self._m[name], pad], axis=axis)
        self._v[name] = np.concatenate([self._v[name], pad], axis=axis)
        tensor.grad = None

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = np.zeros_like(tensor.data)

    def clear_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def snapshot(self) -> Mapping[str, Tensor]:
        """Read-only constant copy of the current values, safe to share across threads."""
        frozen = {}
        for name, tensor in self._params.items():
            data = tensor.data.copy()
            data.setflags(write=False)
            frozen[name] = Tensor(data, name=name)
        return MappingProxyType(frozen)

    def state_dict(self) -> dict[str, Array]:
        return {name: tensor.data.copy() for name, tensor in self._params.items()}


def adam_step(
    params: ParamSet,
    lr: float = DEFAULT_LR,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """One bias-corrected Adam update with decoupled weight decay; clears gradients."""
    missing = [name for name, tensor in params.items() if tensor.grad is None]
    if missing:
        raise OptimizerStateError(f"no gradient for {', '.join(missing)}")
    params.step += 1
    t = params.step
    for name, tensor in params.items():
        g = tensor.grad
        m, v = params.moments(name)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        if weight_decay:
            tensor.data *= 1.0 - lr * weight_decay
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        tensor.grad = None
    return params


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def _scalar(loss: Tensor) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"loss is not finite: {value}")
    return value


def grad_check(
    closure: Callable[[], Tensor],
    params: ParamSet,
    step: float = 1e-4,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients with central finite differences.

    Returns the largest per-parameter relative error
    ``|a - n| / (|a| + |n|)`` (Euclidean norms over the sampled entries).
    With ``samples`` set, only that many randomly chosen entries per parameter
    are perturbed.
    """
    params.zero_grad()
    loss = closure()
    _scalar(loss)
    loss.backward()
    analytic = {name: tensor.grad.copy() for name, tensor in params.items()}
    params.clear_grad()
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for name, tensor in params.items():
        size = tensor.data.size
        if size == 0:
            continue
        positions = np.arange(size)
        if samples is not None and samples < size:
            positions = np.sort(rng.choice(size, samples, replace=False))
        numeric = np.empty(positions.size)
        for j, flat in enumerate(positions):
            where = np.unravel_index(flat, tensor.shape)
            original = tensor.data[where]
            tensor.data[where] = original + step
            up = _scalar(closure())
            tensor.data[where] = original - step
            down = _scalar(closure())
            tensor.data[where] = original
            numeric[j] = (up - down) / (2.0 * step)
        exact = analytic[name].reshape(-1)[positions]
        denom = np.linalg.norm(exact) + np.linalg.norm(numeric)
        if denom == 0.0:
            continue
        error = float(np.linalg.norm(exact - numeric) / denom)
        logger.debug("grad_check %s: relative error %.3e", name, error)
        worst = max(worst, error)
    return worst
