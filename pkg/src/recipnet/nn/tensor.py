"""A deliberately small reverse-mode autodiff core.

Values are float32. Each op output keeps a closure that, given the output
gradient, accumulates into its parents. ``backward`` walks the graph once and
then frees it; a second call on the same graph raises.
"""
import numpy as np

DTYPE = np.float32


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared in an op output; training must abort."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)


def make_result(data, parents, backward_fn, op):
    """Wrap an op output; attaches ``backward_fn`` only when a parent needs grads."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor):
    """Populate ``.grad`` on every leaf that requires it, then free the graph."""
    if root._freed:
        raise GraphError("graph already freed by a previous backward(); run forward again")
    if not root.requires_grad:
        raise GraphError("output does not depend on any tensor that requires grad")
    order = _topo(root)
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._freed = True
            if node is not root:
                node.grad = None
