"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every operation appends a :class:`Node` to the :class:`Tape` owning its
differentiable inputs. Backward rules are themselves written with the same
operations, so calling :func:`gradient` with ``create_graph=True`` records the
backward pass on the tape and the returned gradients can be differentiated
again (double backprop, Hessian-vector products).

Broadcasting is deliberately restricted: binary elementwise ops accept equal
shapes or a 0-d operand. Anything else goes through :func:`broadcast_to`,
whose gradient is an explicit sum.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

Tensor = np.ndarray


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class SecondOrderError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


_state = {"record": True}


@contextlib.contextmanager
def no_record():
    """Evaluate ops on values only; nothing is appended to any tape."""
    prev = _state["record"]
    _state["record"] = False
    try:
        yield
    finally:
        _state["record"] = prev


def as_tensor(x) -> Tensor:
    arr = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


class Node:
    __slots__ = (
        "id", "op", "parents", "value", "requires_grad", "tape", "index",
        "name", "_vjp", "_forward", "second_order",
    )

    def __init__(self, value, op="const", parents=(), tape=None, vjp=None,
                 forward=None, name=None, second_order=True):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.tape = tape
        self.requires_grad = tape is not None
        self._vjp = vjp
        self._forward = forward
        self.name = name
        self.second_order = second_order
        self.id = None
        self.index = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single-element node, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> Tensor:
        return self.value.copy()

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.shape}, grad={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of nodes; creation order is a valid topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._ids = itertools.count()

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: Node) -> Node:
        node.id = next(self._ids)
        node.index = len(self.nodes)
        node.value.flags.writeable = False
        self.nodes.append(node)
        return node

    def leaf(self, value, name: Optional[str] = None) -> Node:
        """Register a differentiable input (a parameter or a probed activation)."""
        return self._append(Node(as_tensor(value), op="leaf", tape=self, name=name))

    def constant(self, value) -> Node:
        return constant(value)

    def replay(self) -> bool:
        """Recompute every node from its parents and check bit-equality."""
        for node in self.nodes:
            if node._forward is None:
                continue
            fresh = node._forward(*(p.value for p in node.parents))
            if not np.array_equal(np.asarray(fresh, dtype=np.float64), node.value):
                raise TapeError(f"replay mismatch at node {node.id} ({node.op})")
        return True

    def depends_on(self, out: Node, target: Node) -> bool:
        """True when ``out`` was computed (transitively) from ``target``."""
        if out is target:
            return True
        if out.tape is not self or target.tape is not self:
            return False
        seen = set()
        stack = [out]
        while stack:
            n = stack.pop()
            if n is target:
                return True
            for p in n.parents:
                if p.tape is self and p.id not in seen and p.index >= target.index:
                    seen.add(p.id)
                    stack.append(p)
        return False


def constant(value) -> Node:
    arr = as_tensor(value)
    arr.flags.writeable = False
    return Node(arr)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _record(op: str, parents: Sequence[Node], value, vjp, forward,
            second_order: bool = True) -> Node:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        shapes = ", ".join(str(p.shape) for p in parents)
        raise NonFiniteError(f"{op}: non-finite output for inputs of shape {shapes}")
    tape = None
    if _state["record"]:
        for p in parents:
            if p.requires_grad:
                if tape is None:
                    tape = p.tape
                elif p.tape is not tape:
                    raise TapeError(f"{op}: inputs live on different tapes")
    if tape is None:
        node = Node(value, op=op)
        node.value.flags.writeable = False
        return node
    node = Node(value, op=op, parents=parents, tape=tape, vjp=vjp,
                forward=forward, second_order=second_order)
    return tape._append(node)


# ---------------------------------------------------------------- elementwise

def _check_binary(op, a: Node, b: Node):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                         "(only equal shapes or a 0-d operand are allowed)")


def _unscalar(g: Node, like: Node) -> Node:
    # gradient flowing into a 0-d operand that was combined with a tensor
    if like.ndim == 0 and g.ndim != 0:
        return sum(g)
    return g


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary("add", a, b)

    def vjp(g):
        return _unscalar(g, a), _unscalar(g, b)

    return _record("add", (a, b), a.value + b.value, vjp, np.add)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary("sub", a, b)

    def vjp(g):
        return _unscalar(g, a), _unscalar(neg(g), b)

    return _record("sub", (a, b), a.value - b.value, vjp, np.subtract)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary("mul", a, b)

    def vjp(g):
        return _unscalar(mul(g, b), a), _unscalar(mul(g, a), b)

    return _record("mul", (a, b), a.value * b.value, vjp, np.multiply)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary("div", a, b)
    if np.any(b.value == 0):
        raise NonFiniteError(f"div: zero in denominator of shape {b.shape}")

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _unscalar(ga, a), _unscalar(gb, b)

    return _record("div", (a, b), a.value / b.value, vjp, np.divide)


def neg(x) -> Node:
    x = as_node(x)
    return _record("neg", (x,), -x.value, lambda g: (neg(g),), np.negative)


def exp(x) -> Node:
    x = as_node(x)
    out_holder = []

    def vjp(g):
        return (mul(g, out_holder[0]),)

    out = _record("exp", (x,), np.exp(x.value), vjp, np.exp)
    out_holder.append(out)
    return out


def log(x) -> Node:
    x = as_node(x)
    if np.any(x.value <= 0):
        raise NonFiniteError(f"log: non-positive input of shape {x.shape}")
    return _record("log", (x,), np.log(x.value), lambda g: (div(g, x),), np.log)


def sqrt(x) -> Node:
    x = as_node(x)
    if np.any(x.value <= 0):
        raise NonFiniteError(f"sqrt: input must be strictly positive (shape {x.shape})")
    out_holder = []

    def vjp(g):
        return (div(g, mul(2.0, out_holder[0])),)

    out = _record("sqrt", (x,), np.sqrt(x.value), vjp, np.sqrt)
    out_holder.append(out)
    return out


def abs(x) -> Node:  # noqa: A001 - mirrors numpy naming
    x = as_node(x)
    sign = np.sign(x.value)

    def vjp(g):
        return (mul(g, constant(sign)),)

    return _record("abs", (x,), np.abs(x.value), vjp, np.abs)


def relu(x) -> Node:
    x = as_node(x)
    mask = (x.value > 0).astype(np.float64)

    def vjp(g):
        return (mul(g, constant(mask)),)

    return _record("relu", (x,), x.value * mask, vjp, lambda v: v * (v > 0))


def custom_elementwise(x, fn: Callable[[Tensor], Tensor],
                       dfn: Callable[[Tensor], Tensor], name: str = "custom") -> Node:
    """Elementwise op given as numpy callables.

    The derivative is evaluated numerically on values, so the op supports
    first-order gradients only; differentiating through its backward raises
    :class:`SecondOrderError`.
    """
    x = as_node(x)

    def vjp(g):
        return (mul(g, constant(dfn(x.value))),)

    return _record(name, (x,), fn(x.value), vjp, fn, second_order=False)


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    x = as_node(x)
    axes = _norm_axes(axis, x.ndim)
    in_shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, in_shape),)

    def fwd(v):
        return np.sum(v, axis=axes, keepdims=keepdims)

    return _record("sum", (x,), fwd(x.value), vjp, fwd)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def broadcast_to(x, shape) -> Node:
    """Expand size-1 axes of ``x`` to ``shape`` (same rank required)."""
    x = as_node(x)
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    if x.ndim != len(shape) or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)

    def vjp(g):
        return (sum(g, axis=axes, keepdims=True),)

    def fwd(v):
        return np.broadcast_to(v, shape).copy()

    return _record("broadcast_to", (x,), fwd(x.value), vjp, fwd)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape) -> Node:
    x = as_node(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    in_shape = x.shape

    def vjp(g):
        return (reshape(g, in_shape),)

    def fwd(v):
        return v.reshape(shape)

    return _record("reshape", (x,), fwd(x.value).copy(), vjp, fwd)


def transpose(x, axes=None) -> Node:
    x = as_node(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inverse),)

    def fwd(v):
        return np.ascontiguousarray(np.transpose(v, axes))

    return _record("transpose", (x,), fwd(x.value), vjp, fwd)


def swap_last(x) -> Node:
    x = as_node(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take(x, indices, axis: int = 0) -> Node:
    """Select ``indices`` along ``axis`` (gradient scatters back)."""
    x = as_node(x)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    size = x.shape[axis]
    if idx.ndim != 1 or np.any(idx < 0) or np.any(idx >= size):
        raise ShapeError(f"take: indices out of range for axis of size {size}")

    def vjp(g):
        return (scatter(g, idx, axis, size),)

    def fwd(v):
        return np.take(v, idx, axis=axis)

    return _record("take", (x,), fwd(x.value), vjp, fwd)


def scatter(x, indices, axis: int, size: int) -> Node:
    """Adjoint of :func:`take`: place slices of ``x`` into zeros of length ``size``."""
    x = as_node(x)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim

    def fwd(v):
        shape = list(v.shape)
        shape[axis] = size
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(v, axis, 0))
        return out

    def vjp(g):
        return (take(g, idx, axis),)

    return _record("scatter", (x,), fwd(x.value), vjp, fwd)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("stack: empty input")
    shape0 = nodes[0].shape
    for n in nodes[1:]:
        if n.shape != shape0:
            raise ShapeError(f"stack: mismatched shapes {shape0} and {n.shape}")
    axis = axis % (len(shape0) + 1)

    def vjp(g):
        return tuple(reshape(take(g, [i], axis), shape0) for i in range(len(nodes)))

    def fwd(*vals):
        return np.stack(vals, axis=axis)

    return _record("stack", tuple(nodes), fwd(*(n.value for n in nodes)), vjp, fwd)


def stop_gradient(x) -> Node:
    return constant(as_node(x).value)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    """2-D matrix product, or batched 3-D product with matching batch size."""
    a, b = as_node(a), as_node(b)
    ok = (
        (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return matmul(g, swap_last(b)), matmul(swap_last(a), g)

    return _record("matmul", (a, b), np.matmul(a.value, b.value), vjp, np.matmul)


def _conv_out(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def im2col(x, k: int, stride: int = 1, padding: int = 0) -> Node:
    """Unfold B×C×H×W into B×(C·k·k)×(H'·W') patches (row-major over c, i, j)."""
    x = as_node(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected B×C×H×W input, got {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = _conv_out(H, k, stride, padding), _conv_out(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"im2col: kernel {k} too large for input {x.shape}")

    def fwd(v):
        vp = np.pad(v, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = np.lib.stride_tricks.sliding_window_view(vp, (k, k), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]  # B, C, Ho, Wo, k, k
        return np.ascontiguousarray(
            win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, Ho * Wo))

    def vjp(g):
        return (col2im(g, (B, C, H, W), k, stride, padding),)

    return _record("im2col", (x,), fwd(x.value), vjp, fwd)


def col2im(cols, image_shape, k: int, stride: int = 1, padding: int = 0) -> Node:
    """Adjoint of :func:`im2col`: scatter-add patches back into an image."""
    cols = as_node(cols)
    B, C, H, W = image_shape
    Ho, Wo = _conv_out(H, k, stride, padding), _conv_out(W, k, stride, padding)
    if cols.shape != (B, C * k * k, Ho * Wo):
        raise ShapeError(f"col2im: got {cols.shape}, expected {(B, C * k * k, Ho * Wo)}")

    def fwd(v):
        v6 = v.reshape(B, C, k, k, Ho, Wo)
        out = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
        for i in range(k):
            for j in range(k):
                out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += v6[:, :, i, j]
        return out[:, :, padding:padding + H, padding:padding + W].copy()

    def vjp(g):
        return (im2col(g, k, stride, padding),)

    return _record("col2im", (cols,), fwd(cols.value), vjp, fwd)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 1) -> Node:
    """Cross-correlation of B×Cin×H×W input with Cout×Cin×k×k kernels."""
    x, w = as_node(x), as_node(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, _, H, W = x.shape
    cout, cin, k, _ = w.shape
    Ho, Wo = _conv_out(H, k, stride, padding), _conv_out(W, k, stride, padding)
    cols = im2col(x, k, stride, padding)                      # B, K, P
    cols2 = reshape(transpose(cols, (1, 0, 2)), (cin * k * k, B * Ho * Wo))
    out = matmul(reshape(w, (cout, cin * k * k)), cols2)      # Cout, B*P
    out = transpose(reshape(out, (cout, B, Ho, Wo)), (1, 0, 2, 3))
    if b is not None:
        out = add_bias(out, b)
    return out


def add_bias(x, b) -> Node:
    """Add a per-feature bias: (B, N) + (N,) or (B, C, H, W) + (C,)."""
    x, b = as_node(x), as_node(b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    shape = [1] * x.ndim
    shape[1] = b.shape[0]
    return add(x, broadcast_to(reshape(b, shape), x.shape))


def linear(x, w, b=None) -> Node:
    """``x @ w.T + b`` with weight stored as (out, in)."""
    out = matmul(x, transpose(w))
    return add_bias(out, b) if b is not None else out


# ---------------------------------------------------------------- composites

def square(x) -> Node:
    x = as_node(x)
    return mul(x, x)


def l2norm(x, axis=-1, keepdims: bool = True) -> Node:
    return sqrt(sum(square(x), axis=axis, keepdims=keepdims))


def logsumexp(x, axis: int = -1, keepdims: bool = True) -> Node:
    x = as_node(x)
    shift = constant(np.max(x.value, axis=axis, keepdims=True))
    shifted = sub(x, broadcast_to(shift, x.shape))
    out = add(log(sum(exp(shifted), axis=axis, keepdims=True)), shift)
    if not keepdims:
        out = reshape(out, np.delete(np.array(x.shape), axis % x.ndim))
    return out


def log_softmax(x, axis: int = -1) -> Node:
    x = as_node(x)
    return sub(x, broadcast_to(logsumexp(x, axis=axis, keepdims=True), x.shape))


def softmax(x, axis: int = -1) -> Node:
    return exp(log_softmax(x, axis=axis))


# ---------------------------------------------------------------- differentiation

def _flow_set(tape: Tape, output: Node, wrt: Sequence[Node]) -> set:
    """Ids of nodes lying on some path from a ``wrt`` node to ``output``."""
    lo = min(n.index for n in wrt)
    downstream = {n.id for n in wrt}
    for node in tape.nodes[lo:output.index + 1]:
        if node.id not in downstream and any(p.id in downstream for p in node.parents if p.tape is tape):
            downstream.add(node.id)
    if output.id not in downstream:
        return set()
    upstream = {output.id}
    for node in reversed(tape.nodes[lo:output.index + 1]):
        if node.id in upstream:
            for p in node.parents:
                if p.tape is tape and p.id in downstream:
                    upstream.add(p.id)
    return upstream


def gradient(output: Node, wrt: Sequence[Node], create_graph: bool = False):
    """d(output)/d(wrt) for a scalar ``output``.

    Returns one entry per ``wrt`` node: Nodes when ``create_graph`` is set
    (differentiable, recorded on the tape), plain arrays otherwise. Inputs the
    output does not depend on get a zero gradient of matching shape.
    """
    if not isinstance(output, Node):
        raise TypeError("gradient: output must be a Node")
    if output.size != 1:
        raise ShapeError(f"gradient: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    tape = output.tape
    relevant = [n for n in wrt if n.tape is not None and n.tape is tape]
    for n in relevant:
        if n.index is None or tape.nodes[n.index] is not n:
            raise TapeError("gradient: tape corrupted (node index mismatch)")
    grads: dict = {}
    if relevant:
        flow = _flow_set(tape, output, relevant)
        ctx = contextlib.nullcontext() if create_graph else no_record()
        with ctx:
            grads[output.id] = constant(np.ones(output.shape))
            lo = min(n.index for n in relevant)
            for node in reversed(tape.nodes[lo:output.index + 1]):
                if node.id not in flow or node.id not in grads or not node.parents:
                    continue
                if create_graph and not node.second_order:
                    raise SecondOrderError(
                        f"op '{node.op}' does not support create_graph; "
                        "use detach_saliency or a twice-differentiable op")
                parent_grads = node._vjp(grads[node.id])
                for p, gp in zip(node.parents, parent_grads):
                    if gp is None or p.tape is not tape or p.id not in flow:
                        continue
                    if gp.shape != p.shape:
                        raise TapeError(f"{node.op}: gradient shape {gp.shape} != {p.shape}")
                    grads[p.id] = add(grads[p.id], gp) if p.id in grads else gp
    out = []
    for n in wrt:
        g = grads.get(n.id) if n.id is not None and n.tape is tape else None
        if g is None:
            g = constant(np.zeros(n.shape))
        out.append(g if create_graph else g.value.copy())
    return out


def second_gradient(output: Node, wrt: Node, direction) -> Tensor:
    """Hessian-vector product H·direction by reverse-over-reverse."""
    direction = as_tensor(direction)
    if direction.shape != wrt.shape:
        raise ShapeError(f"second_gradient: direction {direction.shape} != wrt {wrt.shape}")
    (g,) = gradient(output, [wrt], create_graph=True)
    inner = sum(mul(g, constant(direction)))
    (hv,) = gradient(inner, [wrt])
    return hv


def value_of(x) -> Tensor:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def leaves_of(tape: Tape, names: Iterable[str]) -> list[Node]:
    wanted = set(names)
    return [n for n in tape.nodes if n.op == "leaf" and n.name in wanted]
