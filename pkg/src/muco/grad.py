"""Reverse-mode differentiation engine used by every training stage.

Everything is float64: gradient checking against central finite differences
is a first-class requirement, so precision beats speed. Operations executed
while a Tape is active are recorded in execution order; ``Tape.backward``
replays them in exact reverse order and accumulates gradients additively,
so a tensor consumed twice receives the sum of both contributions.

There is no broadcasting beyond row-wise bias addition in ``affine``; all
other shape mismatches raise ``ShapeMismatchError``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_NORM_EPS = 1e-12


class ShapeMismatchError(ValueError):
    """Raised when operand shapes do not conform."""


class DegenerateInputError(ValueError):
    """Raised when an input is numerically degenerate (e.g. zero norm)."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


class Tensor:
    """A float64 array with an optional accumulated gradient.

    Values are treated as immutable once created, except for in-place
    parameter updates performed by the optimizer between training steps.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of executed operations for one forward pass."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.ops: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        Tape._stack.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(input) back through the recorded operations.

        Gradients accumulate additively into ``Tensor.grad``; call the
        optimizer's ``zero_grad`` between steps.
        """
        if loss.values.shape != ():
            raise ShapeMismatchError(
                f"backward target must be a scalar, got shape {loss.values.shape}"
            )
        loss.grad = np.asarray(1.0)
        for node in reversed(self.ops):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            grads = node.backward_fn(out_grad)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.values.shape:
                    raise ShapeMismatchError(
                        f"{node.name}: gradient shape {grad.shape} does not match "
                        f"value shape {tensor.values.shape}"
                    )
                if tensor.grad is None:
                    tensor.grad = grad
                else:
                    tensor.grad = tensor.grad + grad


def _active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _record(inputs: Sequence[Tensor], out_values, backward_fn, name: str) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=track)
    if track:
        tape.ops.append(_Node(tuple(inputs), out, backward_fn, name))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# numpy helpers (no tape involvement)
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; outputs are positive and sum to 1 along axis."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map: out = x @ weight + bias.

    x is [n, d_in], weight is [d_in, d_out], bias is [d_out] (the only
    broadcasting this engine performs).
    """
    xv, wv, bv = x.values, weight.values, bias.values
    if xv.ndim != 2 or wv.ndim != 2:
        raise ShapeMismatchError(
            f"affine expects 2-d input and weight, got {xv.shape} and {wv.shape}"
        )
    if xv.shape[1] != wv.shape[0]:
        raise ShapeMismatchError(
            f"affine: input shape {xv.shape} incompatible with weight shape {wv.shape}"
        )
    if bv.shape != (wv.shape[1],):
        raise ShapeMismatchError(
            f"affine: bias shape {bv.shape} incompatible with weight shape {wv.shape}"
        )

    def backward(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _record((x, weight, bias), xv @ wv + bv, backward, "affine")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise ShapeMismatchError(f"add: shape {av.shape} does not match {bv.shape}")

    def backward(g):
        return g, g

    return _record((a, b), av + bv, backward, "add")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def backward(g):
        return g @ bv.T, av.T @ g

    return _record((a, b), av @ bv, backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a 2-d tensor, got {x.values.shape}")

    def backward(g):
        return (g.T,)

    return _record((x,), x.values.T.copy(), backward, "transpose")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.values.shape

    def backward(g):
        return (g.reshape(old),)

    return _record((x,), x.values.reshape(shape).copy(), backward, "reshape")


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-d table; gradients scatter-add back into the table."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.values.ndim != 2 or idx.ndim != 1:
        raise ShapeMismatchError(
            f"gather_rows expects 2-d table and 1-d indices, got "
            f"{table.values.shape} and {idx.shape}"
        )
    tv = table.values

    def backward(g):
        acc = np.zeros_like(tv)
        np.add.at(acc, idx, g)
        return (acc,)

    return _record((table,), tv[idx], backward, "gather_rows")


def concat(*parts: Tensor) -> Tensor:
    """Concatenate 1-d tensors."""
    tensors = [_as_tensor(p) for p in parts]
    for t in tensors:
        if t.values.ndim != 1:
            raise ShapeMismatchError(f"concat expects 1-d tensors, got {t.values.shape}")
    sizes = [t.values.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _record(tuple(tensors), np.concatenate([t.values for t in tensors]), backward, "concat")


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise |a - b|; the subgradient at exact zero is 0."""
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise ShapeMismatchError(f"abs_diff: shape {av.shape} does not match {bv.shape}")
    sign = np.sign(av - bv)

    def backward(g):
        return g * sign, -g * sign

    return _record((a, b), np.abs(av - bv), backward, "abs_diff")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _record((x,), y, backward, "tanh")


def mean(x: Tensor) -> Tensor:
    """Mean over rows for 2-d input, mean over elements for 1-d input."""
    xv = x.values
    if xv.ndim == 2:
        n = xv.shape[0]

        def backward(g):
            return (np.broadcast_to(g / n, xv.shape).copy(),)

        return _record((x,), xv.mean(axis=0), backward, "mean")
    if xv.ndim == 1:
        n = xv.shape[0]

        def backward(g):
            return (np.full(xv.shape, g / n),)

        return _record((x,), xv.mean(), backward, "mean")
    raise ShapeMismatchError(f"mean expects a 1-d or 2-d tensor, got {xv.shape}")


def sum_all(x: Tensor) -> Tensor:
    xv = x.values

    def backward(g):
        return (np.full(xv.shape, g),)

    return _record((x,), xv.sum(), backward, "sum_all")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit L2 norm.

    The exact Jacobian of v -> v/||v|| is (I - uu^T)/||v|| with u the
    normalized output, which the backward pass applies directly.
    """
    xv = x.values
    if xv.ndim == 1:
        norm = float(np.linalg.norm(xv))
        if norm <= _NORM_EPS:
            raise DegenerateInputError(f"l2_normalize: input norm {norm} is below {_NORM_EPS}")
        u = xv / norm

        def backward(g):
            return ((g - u * (u @ g)) / norm,)

        return _record((x,), u, backward, "l2_normalize")
    if xv.ndim == 2:
        norms = np.linalg.norm(xv, axis=1, keepdims=True)
        if norms.min() <= _NORM_EPS:
            raise DegenerateInputError(
                f"l2_normalize: minimum row norm {norms.min()} is below {_NORM_EPS}"
            )
        u = xv / norms

        def backward(g):
            dots = (u * g).sum(axis=1, keepdims=True)
            return ((g - u * dots) / norms,)

        return _record((x,), u, backward, "l2_normalize")
    raise ShapeMismatchError(f"l2_normalize expects 1-d or 2-d input, got {xv.shape}")


def neg_dot(a: Tensor, b: Tensor) -> Tensor:
    """Negative inner product -a.b with gradients (-b, -a)."""
    av, bv = a.values, b.values
    if av.ndim != 1 or av.shape != bv.shape:
        raise ShapeMismatchError(f"neg_dot: shape {av.shape} does not match {bv.shape}")

    def backward(g):
        return -bv * g, -av * g

    return _record((a, b), np.asarray(-(av @ bv)), backward, "neg_dot")


def _check_distribution(t: np.ndarray) -> None:
    if t.min() < -1e-12:
        raise ValueError(f"target is not a distribution: negative entry {t.min()}")
    sums = t.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-9:
        raise ValueError(
            f"target is not a distribution: row sums deviate from 1 by {np.max(np.abs(sums - 1.0))}"
        )


def softmax_xent(logits: Tensor, target) -> Tensor:
    """Cross-entropy of a max-shifted softmax against a target distribution.

    1-d input: returns -sum(target * log softmax(logits)).
    2-d input: one distribution per row; returns the mean loss over rows.
    Soft targets are supported; each row must be non-negative and sum to 1.
    """
    t = _as_tensor(target)
    lv, tv = logits.values, t.values
    if lv.shape != tv.shape or lv.ndim not in (1, 2):
        raise ShapeMismatchError(
            f"softmax_xent: logits shape {lv.shape} does not match target shape {tv.shape}"
        )
    _check_distribution(tv)
    logp = _log_softmax(lv)
    p = np.exp(logp)
    if lv.ndim == 1:
        loss = -(tv * logp).sum()

        def backward(g):
            return (p - tv) * g, -logp * g

    else:
        n = lv.shape[0]
        loss = -(tv * logp).sum(axis=1).mean()

        def backward(g):
            return (p - tv) * (g / n), -logp * (g / n)

    return _record((logits, t), np.asarray(loss), backward, "softmax_xent")


def sigmoid_bce(logit: Tensor, label) -> Tensor:
    """Stable binary cross-entropy of sigmoid(logit) against a 0/1 label.

    Accepts a scalar logit or a batch (any shape); batches return the mean.
    """
    z = logit.values
    y = np.asarray(label, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeMismatchError(f"sigmoid_bce: label shape {y.shape} does not match {z.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("sigmoid_bce labels must be 0 or 1")
    # max(z,0) - z*y + log(1+exp(-|z|)) is exact and overflow-free
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = max(per.size, 1)
    sig = sigmoid(z)

    def backward(g):
        return ((sig - y) * (g / count),)

    return _record((logit,), np.asarray(per.mean()), backward, "sigmoid_bce")


def mul_scalar(x: Tensor, s: Tensor | float) -> Tensor:
    """Multiply a tensor by a (possibly trainable) scalar."""
    st = _as_tensor(s)
    if st.values.shape not in ((), (1,)):
        raise ShapeMismatchError(f"mul_scalar expects a scalar, got shape {st.values.shape}")
    sv = float(st.values)
    xv = x.values

    def backward(g):
        gs = np.asarray((g * xv).sum()).reshape(st.values.shape)
        return g * sv, gs

    return _record((x, st), xv * sv, backward, "mul_scalar")


# ---------------------------------------------------------------------------
# optimizer and gradient checking
# ---------------------------------------------------------------------------


class SGD:
    """Plain stochastic gradient descent with a fixed learning rate."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = [p for p in params if p.requires_grad]
        self.lr = float(lr)

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.values -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Compare the analytic gradient of a scalar function to central differences.

    Returns max over components of |analytic - numeric| relative to
    max(|analytic|, |numeric|, 1e-8).
    """
    x0 = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(x)
    if out.values.shape != ():
        raise ShapeMismatchError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.values):
        raise NumericalError("grad_check: function value is not finite")
    tape.backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    def eval_at(arr: np.ndarray) -> float:
        v = f(Tensor(arr)).values
        fv = float(v)
        if not np.isfinite(fv):
            raise NumericalError("grad_check: perturbed function value is not finite")
        return fv

    numeric = np.zeros_like(x0)
    flat_num = numeric.reshape(-1)
    flat0 = x0.reshape(-1)
    for i in range(flat0.size):
        orig = flat0[i]
        probe = x0.copy().reshape(-1)
        probe[i] = orig + h
        fp = eval_at(probe.reshape(x0.shape))
        probe[i] = orig - h
        fm = eval_at(probe.reshape(x0.shape))
        flat_num[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat0.size else 0.0
