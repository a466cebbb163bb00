"""Reverse-mode automatic differentiation on dense float64 arrays.

Small tape-style graph sized for recurrent nets, kernel distances and
adversarial objectives. Values are C-contiguous float64 numpy arrays;
elementwise ops broadcast only over leading batch-like dimensions (one
operand's shape must be a suffix of the other's), so trailing-dimension
shape bugs fail loudly instead of silently broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EXP_CLAMP = 40.0

_clamp_events = 0


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def clamp_count() -> int:
    """Number of exp-argument clamps since the last reset."""
    return _clamp_events


def reset_clamp_count() -> None:
    global _clamp_events
    _clamp_events = 0


def _as_array(x) -> np.ndarray:
    # ascontiguousarray promotes 0-d to (1,); keep scalars truly 0-d
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.shape == (1,) and np.ndim(x) == 0:
        return a.reshape(())
    return a


def _check_finite(a: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    return a


class Node:
    """One value in the computation graph.

    ``value`` is the forward result, ``grad`` is materialized on demand by
    :func:`backward`, ``parents`` plus ``_vjp`` encode the backward rule.
    """

    __slots__ = ("value", "grad", "parents", "op", "name", "trainable", "_vjp")

    def __init__(self, value, parents=(), vjp=None, op="leaf", name=None, trainable=False):
        self.value = _as_array(value)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.name = name
        self.trainable = trainable
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or self.op
        return f"Node({tag}, shape={self.value.shape})"


def parameter(name: str, value) -> Node:
    return Node(value, op="param", name=name, trainable=True)


def constant(value) -> Node:
    return Node(value, op="const")


def custom(value, parents, vjp, op: str) -> Node:
    """Build a node with a hand-written backward rule.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent.
    """
    return Node(_check_finite(_as_array(value), op), parents=parents, vjp=vjp, op=op)


def _binary_shapes(a: Node, b: Node, op: str):
    """Validate elementwise shapes: equal, or one a strict suffix of the other
    (broadcast over leading batch-like dims only; no trailing broadcasts)."""
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return None
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return "b"  # b is broadcast over a's leading dims
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return "a"
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, target_shape, who: str, reduced: str | None):
    if reduced == who:
        extra = g.ndim - len(target_shape)
        return np.ascontiguousarray(g.sum(axis=tuple(range(extra))))
    return g


def add(a: Node, b: Node) -> Node:
    reduced = _binary_shapes(a, b, "add")
    out = _check_finite(a.value + b.value, "add")

    def vjp(g):
        return (_unbroadcast(g, a.shape, "a", reduced), _unbroadcast(g, b.shape, "b", reduced))

    return Node(out, (a, b), vjp, op="add")


def sub(a: Node, b: Node) -> Node:
    reduced = _binary_shapes(a, b, "sub")
    out = _check_finite(a.value - b.value, "sub")

    def vjp(g):
        return (_unbroadcast(g, a.shape, "a", reduced), _unbroadcast(-g, b.shape, "b", reduced))

    return Node(out, (a, b), vjp, op="sub")


def mul(a: Node, b: Node) -> Node:
    reduced = _binary_shapes(a, b, "mul")
    out = _check_finite(a.value * b.value, "mul")

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.shape, "a", reduced),
            _unbroadcast(g * a.value, b.shape, "b", reduced),
        )

    return Node(out, (a, b), vjp, op="mul")


def matmul(a: Node, b: Node) -> Node:
    """a @ b where b is a plain matrix; a may carry leading batch dims."""
    if a.value.ndim < 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul: need (.., m, k) @ (k, n), got {a.shape} @ {b.shape}")
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    out = _check_finite(a.value @ b.value, "matmul")

    def vjp(g):
        ga = g @ b.value.T
        gb = a.value.reshape(-1, a.value.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return (ga, gb)

    return Node(out, (a, b), vjp, op="matmul")


def scale(a: Node, k: float) -> Node:
    k = float(k)
    out = _check_finite(a.value * k, "scale")

    def vjp(g):
        return (g * k,)

    return Node(out, (a,), vjp, op="scale")


def add_scalar(a: Node, k: float) -> Node:
    k = float(k)
    out = _check_finite(a.value + k, "add_scalar")

    def vjp(g):
        return (g,)

    return Node(out, (a,), vjp, op="add_scalar")


def mask_mul(a: Node, mask) -> Node:
    """Multiply by a constant mask; the mask may broadcast per numpy rules.

    Constant data (one-hot selectors, validity masks) carries no gradient,
    so the leading-dim-only broadcast restriction does not apply here.
    """
    m = np.asarray(mask, dtype=np.float64)
    out = _check_finite(a.value * m, "mask_mul")

    def vjp(g):
        gm = g * m
        if gm.shape != a.value.shape:
            raise ShapeError(f"mask_mul: mask {m.shape} enlarges operand {a.shape}")
        return (gm,)

    return Node(out, (a,), vjp, op="mask_mul")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Node(out, (a,), vjp, op="tanh")


def sigmoid(a: Node) -> Node:
    out = 1.0 / (1.0 + np.exp(-np.clip(a.value, -EXP_CLAMP, EXP_CLAMP)))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Node(out, (a,), vjp, op="sigmoid")


def exp(a: Node) -> Node:
    global _clamp_events
    v = a.value
    over = v > EXP_CLAMP
    if over.any():
        _clamp_events += int(over.sum())
        v = np.minimum(v, EXP_CLAMP)
    out = np.exp(v)

    def vjp(g):
        return (g * out,)

    return Node(out, (a,), vjp, op="exp")


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise NumericError("log: non-positive argument")
    out = np.log(a.value)

    def vjp(g):
        return (g / a.value,)

    return Node(out, (a,), vjp, op="log")


def sqrt(a: Node) -> Node:
    if np.any(a.value < 0.0):
        raise NumericError("sqrt: negative argument")
    out = np.sqrt(a.value)

    def vjp(g):
        return (_check_finite(0.5 * g / out, "sqrt-backward"),)

    return Node(out, (a,), vjp, op="sqrt")


def square(a: Node) -> Node:
    out = _check_finite(a.value * a.value, "square")

    def vjp(g):
        return (2.0 * g * a.value,)

    return Node(out, (a,), vjp, op="square")


def _restore_axis(g: np.ndarray, shape, axis: int) -> np.ndarray:
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum_axis(a: Node, axis: int) -> Node:
    out = a.value.sum(axis=axis)

    def vjp(g):
        return (np.ascontiguousarray(_restore_axis(g, a.value.shape, axis)),)

    return Node(_check_finite(out, "sum_axis"), (a,), vjp, op="sum_axis")


def mean_axis(a: Node, axis: int) -> Node:
    n = a.value.shape[axis]
    out = a.value.mean(axis=axis)

    def vjp(g):
        return (np.ascontiguousarray(_restore_axis(g, a.value.shape, axis)) / n,)

    return Node(_check_finite(out, "mean_axis"), (a,), vjp, op="mean_axis")


def sum_all(a: Node) -> Node:
    out = np.asarray(a.value.sum())

    def vjp(g):
        return (np.full(a.value.shape, np.asarray(g).item()),)

    return Node(_check_finite(out, "sum_all"), (a,), vjp, op="sum_all")


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = np.asarray(a.value.mean())

    def vjp(g):
        return (np.full(a.value.shape, np.asarray(g).item() / n),)

    return Node(_check_finite(out, "mean_all"), (a,), vjp, op="mean_all")


def sumsq(a: Node) -> Node:
    """Squared L2 norm of all elements."""
    out = np.asarray(float(np.dot(a.value.ravel(), a.value.ravel())))

    def vjp(g):
        return (2.0 * np.asarray(g).item() * a.value,)

    return Node(_check_finite(out, "sumsq"), (a,), vjp, op="sumsq")


def concat(nodes, axis: int = -1) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat: empty input list")
    shapes = [n.value.shape for n in nodes]
    base = list(shapes[0])
    ax = axis if axis >= 0 else len(base) + axis
    for s in shapes[1:]:
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != ax):
            raise ShapeError(f"concat: shapes {shapes} differ off axis {axis}")
    out = np.concatenate([n.value for n in nodes], axis=ax)
    sizes = [s[ax] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(nodes)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(pieces)

    return Node(_check_finite(out, "concat"), tuple(nodes), vjp, op="concat")


def narrow(a: Node, axis: int, start: int, stop: int) -> Node:
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.value[idx])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        return (full,)

    return Node(out, (a,), vjp, op="narrow")


def softmax(a: Node, axis: int = -1) -> Node:
    v = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(v)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Node(_check_finite(out, "softmax"), (a,), vjp, op="softmax")


def grad_reverse(a: Node, strength: float = 1.0) -> Node:
    """Identity forward, negated (scaled) gradient backward.

    Zero strength detaches outright (no gradient at all), so a disabled
    adversarial branch leaves the rest of the backward pass bit-identical.
    """
    k = float(strength)

    def vjp(g):
        return (-k * g,) if k != 0.0 else (None,)

    return Node(a.value, (a,), vjp, op="grad_reverse")


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into .grad for every reachable node."""
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")

    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    seed = np.ones_like(root.value)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        # intermediates adopt g without copying; parameters copy because a
        # vjp may hand the same array to two parents and optimizer code
        # mutates parameter gradients in place
        if node.grad is None:
            node.grad = g.copy() if node.trainable else g
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if pg.shape != p.value.shape:
                raise ShapeError(
                    f"backward({node.op}): gradient shape {pg.shape} != value shape {p.value.shape}"
                )
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst: tuple = ()
    failures: list = field(default_factory=list)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} at {self.worst}"


def grad_check(f, params, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare backward() gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Node built from
    ``params``. Relative error uses an absolute floor of 1e-2 in the
    denominator so near-zero gradients are compared absolutely.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be > 0")
    if tolerance < 0:
        raise ValueError("grad_check: tolerance must be >= 0")

    zero_grad(params)
    root = f()
    backward(root)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    worst = ()
    failures = []
    for pi, p in enumerate(params):
        flat = p.value.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            fp = f().value.item()
            flat[i] = keep - step
            fm = f().value.item()
            flat[i] = keep
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(
                    f"grad_check: non-finite objective at perturbed {p.name or pi}[{i}]"
                )
            num = (fp - fm) / (2.0 * step)
            ana = analytic[pi].ravel()[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-2)
            if rel > max_rel:
                max_rel = rel
                worst = (p.name or f"param{pi}", i, float(ana), float(num))
            if rel > tolerance:
                failures.append((p.name or f"param{pi}", i, float(ana), float(num), rel))
    return GradCheckReport(passed=not failures, max_rel_err=max_rel, worst=worst, failures=failures)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    return float(np.sqrt(total))


def clip_global_norm(params, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        k = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= k
    return norm


def sgd_step(params, learning_rate: float, grads=None, momentum: float = 0.0, state=None):
    """In-place SGD update: param <- param - lr * grad (optional momentum)."""
    if learning_rate <= 0:
        raise ValueError("sgd_step: learning_rate must be > 0")
    for i, p in enumerate(params):
        g = p.grad if grads is None else grads[i]
        if g is None:
            continue
        if g.shape != p.value.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} != param shape {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"sgd_step: non-finite gradient for parameter '{p.name}'")
        if momentum > 0.0 and state is not None:
            v = state.get(p.name)
            v = momentum * v + g if v is not None else g.copy()
            state[p.name] = v
            g = v
        p.value -= learning_rate * g
    return params
